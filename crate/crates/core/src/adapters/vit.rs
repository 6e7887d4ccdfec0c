//! Small vision transformer: linear patch embedding, class token,
//! learned positional embeddings and pre-norm encoder blocks with
//! single-head self-attention. Global logits come from the class token
//! through the head; local logits come from the patch-token grid,
//! adaptively average-pooled and passed position-wise through the same
//! head.

use super::{check_grid, headwise, normalized_input, AdapterMeta, Family, ModelAdapter, ModelSpec};
use crate::error::{Error, Result};
use crate::init;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use xfer_tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitParams {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    /// Without a class token the global embedding is the mean of all
    /// patch tokens.
    pub use_cls: bool,
}

impl Default for VitParams {
    fn default() -> Self {
        VitParams {
            patch: 8,
            dim: 24,
            depth: 2,
            mlp_ratio: 2.0,
            use_cls: true,
        }
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(din: usize, dout: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            w: Tensor::param(init::normal_array(&[din, dout], 0.02, rng)),
            b: Tensor::param(init::zeros(&[dout])),
        }
    }

    /// Apply over the last axis of (b, n, din).
    fn tokens(&self, x: &Tensor) -> Tensor {
        let sh = x.shape();
        let dout = self.w.shape()[1];
        x.reshape(&[sh[0] * sh[1], sh[2]])
            .matmul(&self.w)
            .add_bias_rows(&self.b)
            .reshape(&[sh[0], sh[1], dout])
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        out.push((format!("{prefix}.bias"), self.b.clone()));
    }
}

struct LayerNorm {
    g: Tensor,
    b: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            g: Tensor::param(init::ones(&[d])),
            b: Tensor::param(init::zeros(&[d])),
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.g, &self.b, 1e-6)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.g.clone()));
        out.push((format!("{prefix}.beta"), self.b.clone()));
    }
}

struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    scale: f64,
}

impl Block {
    fn new(dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            proj: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
            scale: 1.0 / (dim as f64).sqrt(),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let n = self.ln1.apply(x);
        let q = self.q.tokens(&n);
        let k = self.k.tokens(&n);
        let v = self.v.tokens(&n);
        let scores = q.bmm(&k.permute(&[0, 2, 1])).mul_scalar(self.scale);
        let attn = scores.softmax_last().bmm(&v);
        let x = x.add(&self.proj.tokens(&attn));
        let m = self.ln2.apply(&x);
        let h = self.fc1.tokens(&m).gelu();
        x.add(&self.fc2.tokens(&h))
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.named(&format!("{prefix}.ln1"), out);
        self.q.named(&format!("{prefix}.q"), out);
        self.k.named(&format!("{prefix}.k"), out);
        self.v.named(&format!("{prefix}.v"), out);
        self.proj.named(&format!("{prefix}.proj"), out);
        self.ln2.named(&format!("{prefix}.ln2"), out);
        self.fc1.named(&format!("{prefix}.fc1"), out);
        self.fc2.named(&format!("{prefix}.fc2"), out);
    }
}

pub struct ToyVit {
    meta: AdapterMeta,
    hp: VitParams,
    embed: Linear,
    cls: Option<Tensor>, // (1, 1, dim)
    pos: Tensor,         // (tokens, dim)
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear, // (dim, classes)
    grid: (usize, usize),
}

impl ToyVit {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let hp: VitParams = if spec.arch_params.is_null() {
            VitParams::default()
        } else {
            serde_json::from_value(spec.arch_params.clone())
                .map_err(|e| Error::Config(format!("bad toy_vit params: {e}")))?
        };
        let (h, w) = spec.input_size;
        if hp.patch == 0 || h % hp.patch != 0 || w % hp.patch != 0 {
            return Err(Error::GridInference(format!(
                "input {}x{} does not tile into {}x{} patches",
                h, w, hp.patch, hp.patch
            )));
        }
        if hp.dim == 0 || hp.depth == 0 {
            return Err(Error::Config("toy_vit needs dim >= 1 and depth >= 1".into()));
        }
        let grid = (h / hp.patch, w / hp.patch);
        let n_patches = grid.0 * grid.1;
        let n_tokens = n_patches + if hp.use_cls { 1 } else { 0 };
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let embed = Linear::new(spec.channels * hp.patch * hp.patch, hp.dim, &mut rng);
        let cls = hp.use_cls.then(|| Tensor::param(init::normal_array(&[1, 1, hp.dim], 0.02, &mut rng)));
        let pos = Tensor::param(init::normal_array(&[n_tokens, hp.dim], 0.02, &mut rng));
        let hidden = ((hp.dim as f64) * hp.mlp_ratio).round().max(1.0) as usize;
        let blocks = (0..hp.depth).map(|_| Block::new(hp.dim, hidden, &mut rng)).collect();
        let ln_final = LayerNorm::new(hp.dim);
        let head = Linear::new(hp.dim, spec.num_classes, &mut rng);
        Ok(ToyVit {
            meta: AdapterMeta::new(
                spec.model_id.clone(),
                Family::Vit,
                spec.num_classes,
                spec.input_size,
                spec.channels,
                spec.mean.clone(),
                spec.std.clone(),
            ),
            hp,
            embed,
            cls,
            pos,
            blocks,
            ln_final,
            head,
            grid,
        })
    }

    /// Encoder output after the final layer norm: (b, tokens, dim).
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let xn = normalized_input(&self.meta, x)?;
        let sh = xn.shape();
        let (b, c) = (sh[0], sh[1]);
        let p = self.hp.patch;
        let (gh, gw) = self.grid;
        // (b, c, h, w) -> (b, gh, gw, c, p, p) -> (b, n, c*p*p)
        let patches = xn
            .reshape(&[b, c, gh, p, gw, p])
            .permute(&[0, 2, 4, 1, 3, 5])
            .reshape(&[b, gh * gw, c * p * p]);
        let mut tokens = self.embed.tokens(&patches);
        if let Some(cls) = &self.cls {
            tokens = cls.broadcast_axis0(b).concat(&tokens, 1);
        }
        let mut t = tokens.add_bias_tokens(&self.pos);
        for block in &self.blocks {
            t = block.forward(&t);
        }
        Ok(self.ln_final.apply(&t))
    }

    /// Split the encoded sequence into (global embedding (b, dim), patch
    /// tokens (b, n, dim)).
    fn split(&self, encoded: &Tensor) -> Result<(Tensor, Tensor)> {
        let sh = encoded.shape();
        let n_patches = self.grid.0 * self.grid.1;
        let patch_tokens = if self.hp.use_cls {
            encoded.slice_axis_range(1, 1, sh[1])
        } else {
            encoded.clone()
        };
        let got = patch_tokens.shape()[1];
        if got != n_patches {
            return Err(Error::GridInference(format!(
                "{} patch tokens cannot fill a {}x{} grid",
                got, self.grid.0, self.grid.1
            )));
        }
        let global_embed = if self.hp.use_cls {
            encoded.slice_axis_range(1, 0, 1).reshape(&[sh[0], sh[2]])
        } else {
            // token-mean global embedding for class-token-free variants
            patch_tokens.mean_tokens()
        };
        Ok((global_embed, patch_tokens))
    }

    fn local_from_tokens(&self, patch_tokens: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        check_grid(grid)?;
        let sh = patch_tokens.shape();
        let (b, d) = (sh[0], sh[2]);
        let (gh, gw) = self.grid;
        // (b, n, d) -> (b, d, gh, gw)
        let fmap = patch_tokens.reshape(&[b, gh, gw, d]).permute(&[0, 3, 1, 2]);
        let pooled = match grid {
            Some((h, w)) if (h, w) != (gh, gw) => fmap.adaptive_avg_pool2d(h, w),
            _ => fmap,
        };
        Ok(headwise(&pooled, &self.head.w, &self.head.b))
    }
}

trait TokenMean {
    fn mean_tokens(&self) -> Tensor;
}

impl TokenMean for Tensor {
    /// (b, n, d) -> (b, d), mean over the token axis.
    fn mean_tokens(&self) -> Tensor {
        let sh = self.shape();
        self.permute(&[0, 2, 1])
            .reshape(&[sh[0], sh[2], sh[1], 1])
            .global_avg_pool()
    }
}

pub fn build(spec: &ModelSpec) -> Result<Box<dyn ModelAdapter>> {
    Ok(Box::new(ToyVit::new(spec)?))
}

impl ModelAdapter for ToyVit {
    fn meta(&self) -> &AdapterMeta {
        &self.meta
    }

    fn arch_name(&self) -> &str {
        "toy_vit"
    }

    fn arch_params(&self) -> serde_json::Value {
        json!({
            "patch": self.hp.patch,
            "dim": self.hp.dim,
            "depth": self.hp.depth,
            "mlp_ratio": self.hp.mlp_ratio,
            "use_cls": self.hp.use_cls,
        })
    }

    fn native_grid(&self) -> (usize, usize) {
        self.grid
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.embed.named("embed", &mut out);
        if let Some(cls) = &self.cls {
            out.push(("cls".into(), cls.clone()));
        }
        out.push(("pos".into(), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("block{i}"), &mut out);
        }
        self.ln_final.named("ln_final", &mut out);
        self.head.named("head", &mut out);
        out
    }

    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor> {
        let enc = self.encode(x)?;
        let (global_embed, _) = self.split(&enc)?;
        Ok(global_embed.matmul(&self.head.w).add_bias_rows(&self.head.b))
    }

    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        let enc = self.encode(x)?;
        let (_, patch_tokens) = self.split(&enc)?;
        self.local_from_tokens(&patch_tokens, grid)
    }

    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)> {
        let enc = self.encode(x)?;
        let (global_embed, patch_tokens) = self.split(&enc)?;
        let global = global_embed.matmul(&self.head.w).add_bias_rows(&self.head.b);
        let local = self.local_from_tokens(&patch_tokens, grid)?;
        Ok((global, local))
    }

    fn backbone_features_t(&self, _x: &Tensor) -> Result<(Tensor, Tensor)> {
        Err(Error::UnsupportedArchitecture(
            "class-activation maps are defined on CNN-family adapters; \
             rerun with a cnn-family model"
                .into(),
        ))
    }
}
