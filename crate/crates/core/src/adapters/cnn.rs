//! Small convolutional classifier: stacked 3x3 conv / relu / 2x2 average
//! pool stages, a global-average-pooled linear head for global logits and
//! the same head applied position-wise over the final feature map for the
//! local grid.

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
pub struct CnnParams {
    /// Output channels of each conv stage; every stage halves the spatial size.
    pub channels: Vec<usize>,
}

impl Default for CnnParams {
    fn default() -> Self {
        CnnParams {
            channels: vec![8, 16, 16],
        }
    }
}

pub struct ToyCnn {
    meta: AdapterMeta,
    hp: CnnParams,
    convs: Vec<(Tensor, Tensor)>, // (weight (cout,cin,3,3), bias (cout,))
    head_w: Tensor,               // (cf, classes)
    head_b: Tensor,               // (classes,)
    grid: (usize, usize),
}

impl ToyCnn {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let hp: CnnParams = if spec.arch_params.is_null() {
            CnnParams::default()
        } else {
            serde_json::from_value(spec.arch_params.clone())
                .map_err(|e| Error::Config(format!("bad toy_cnn params: {e}")))?
        };
        if hp.channels.is_empty() {
            return Err(Error::Config("toy_cnn needs at least one conv stage".into()));
        }
        let (h, w) = spec.input_size;
        let div = 1usize << hp.channels.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{} pooling stages",
                h,
                w,
                hp.channels.len()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let mut convs = Vec::new();
        let mut cin = spec.channels;
        for &cout in &hp.channels {
            let fan_in = cin * 9;
            convs.push((
                Tensor::param(init::kaiming(&[cout, cin, 3, 3], fan_in, &mut rng)),
                Tensor::param(init::zeros(&[cout])),
            ));
            cin = cout;
        }
        let cf = *hp.channels.last().unwrap();
        let head_w = Tensor::param(init::normal_array(
            &[cf, spec.num_classes],
            (1.0 / cf as f64).sqrt(),
            &mut rng,
        ));
        let head_b = Tensor::param(init::zeros(&[spec.num_classes]));
        Ok(ToyCnn {
            meta: AdapterMeta::new(
                spec.model_id.clone(),
                Family::Cnn,
                spec.num_classes,
                spec.input_size,
                spec.channels,
                spec.mean.clone(),
                spec.std.clone(),
            ),
            hp,
            convs,
            head_w,
            head_b,
            grid: (h / div, w / div),
        })
    }

    /// Final feature map (b, cf, gh, gw).
    fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = normalized_input(&self.meta, x)?;
        for (w, b) in &self.convs {
            t = t.conv2d(w, 1, 1).add_bias_chan(b).relu().avg_pool2d(2);
        }
        Ok(t)
    }

    fn local_from_features(&self, features: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        check_grid(grid)?;
        let pooled = match grid {
            Some((h, w)) if (h, w) != self.grid => features.adaptive_avg_pool2d(h, w),
            _ => features.clone(),
        };
        Ok(headwise(&pooled, &self.head_w, &self.head_b))
    }
}

pub fn build(spec: &ModelSpec) -> Result<Box<dyn ModelAdapter>> {
    Ok(Box::new(ToyCnn::new(spec)?))
}

impl ModelAdapter for ToyCnn {
    fn meta(&self) -> &AdapterMeta {
        &self.meta
    }

    fn arch_name(&self) -> &str {
        "toy_cnn"
    }

    fn arch_params(&self) -> serde_json::Value {
        json!({ "channels": self.hp.channels })
    }

    fn native_grid(&self) -> (usize, usize) {
        self.grid
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), w.clone()));
            out.push((format!("conv{i}.bias"), b.clone()));
        }
        out.push(("head.weight".into(), self.head_w.clone()));
        out.push(("head.bias".into(), self.head_b.clone()));
        out
    }

    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone(x)?;
        Ok(f.global_avg_pool().matmul(&self.head_w).add_bias_rows(&self.head_b))
    }

    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        let f = self.backbone(x)?;
        self.local_from_features(&f, grid)
    }

    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)> {
        let f = self.backbone(x)?;
        let global = f.global_avg_pool().matmul(&self.head_w).add_bias_rows(&self.head_b);
        let local = self.local_from_features(&f, grid)?;
        Ok((global, local))
    }

    fn backbone_features_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.backbone(x)?;
        let global = f.global_avg_pool().matmul(&self.head_w).add_bias_rows(&self.head_b);
        Ok((f, global))
    }
}
