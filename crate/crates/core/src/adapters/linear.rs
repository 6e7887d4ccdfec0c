//! Single-layer linear classifier. Degenerate CNN-family adapter with a
//! 1x1 native grid, used for closed-form oracles: its logits are exactly
//! W . flatten(x) + b on the normalized input.

use super::{check_grid, normalized_input, AdapterMeta, Family, ModelAdapter, ModelSpec};
use crate::error::Result;
use crate::init;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;
use xfer_tensor::Tensor;

pub struct LinearModel {
    meta: AdapterMeta,
    weight: Tensor, // (d, c)
    bias: Tensor,   // (c,)
}

impl LinearModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.channels * spec.input_size.0 * spec.input_size.1;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let weight = Tensor::param(init::normal_array(&[d, spec.num_classes], (1.0 / d as f64).sqrt(), &mut rng));
        let bias = Tensor::param(init::zeros(&[spec.num_classes]));
        Ok(LinearModel {
            meta: AdapterMeta::new(
                spec.model_id.clone(),
                Family::Cnn,
                spec.num_classes,
                spec.input_size,
                spec.channels,
                spec.mean.clone(),
                spec.std.clone(),
            ),
            weight,
            bias,
        })
    }

    /// Feature "map": the flattened normalized input viewed as (b, d, 1, 1).
    fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let xn = normalized_input(&self.meta, x)?;
        let sh = xn.shape();
        let d = sh[1] * sh[2] * sh[3];
        Ok(xn.reshape(&[sh[0], d, 1, 1]))
    }
}

pub fn build(spec: &ModelSpec) -> Result<Box<dyn ModelAdapter>> {
    Ok(Box::new(LinearModel::new(spec)?))
}

impl ModelAdapter for LinearModel {
    fn meta(&self) -> &AdapterMeta {
        &self.meta
    }

    fn arch_name(&self) -> &str {
        "linear"
    }

    fn arch_params(&self) -> serde_json::Value {
        json!({})
    }

    fn native_grid(&self) -> (usize, usize) {
        (1, 1)
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![("weight".into(), self.weight.clone()), ("bias".into(), self.bias.clone())]
    }

    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone(x)?;
        Ok(f.global_avg_pool().matmul(&self.weight).add_bias_rows(&self.bias))
    }

    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        check_grid(grid)?;
        let f = self.backbone(x)?;
        let pooled = match grid {
            Some((h, w)) if (h, w) != (1, 1) => f.adaptive_avg_pool2d(h, w),
            _ => f,
        };
        Ok(super::headwise(&pooled, &self.weight, &self.bias))
    }

    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)> {
        Ok((self.global_logits_t(x)?, self.local_logits_t(x, grid)?))
    }

    fn backbone_features_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.backbone(x)?;
        let global = f.global_avg_pool().matmul(&self.weight).add_bias_rows(&self.bias);
        Ok((f, global))
    }
}
