//! Shared fixtures for the integration tests: tiny models, random
//! batches and a forward-counting adapter wrapper.

#![allow(dead_code)]

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde_json::json;
use std::cell::Cell;
use xfer_core::adapters::{ArchRegistry, Family, LocalFeatureGrid, ModelAdapter, ModelSpec};
use xfer_core::Result;
use xfer_tensor::Tensor;

pub fn spec(id: &str, arch: &str, family: Family, classes: usize, size: usize, channels: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        model_id: id.to_string(),
        arch: arch.to_string(),
        family,
        num_classes: classes,
        input_size: (size, size),
        channels,
        mean: vec![0.5; channels],
        std: vec![0.25; channels],
        seed,
        arch_params: serde_json::Value::Null,
    }
}

/// 8x8 single-channel linear model.
pub fn tiny_linear(id: &str, classes: usize, seed: u64) -> Box<dyn ModelAdapter> {
    ArchRegistry::builtin()
        .build(&spec(id, "linear", Family::Cnn, classes, 8, 1, seed))
        .unwrap()
}

/// 8x8 single-channel CNN with one small conv stage (42 params at 3 classes).
pub fn tiny_cnn(id: &str, classes: usize, seed: u64) -> Box<dyn ModelAdapter> {
    let mut s = spec(id, "toy_cnn", Family::Cnn, classes, 8, 1, seed);
    s.arch_params = json!({"channels": [3]});
    ArchRegistry::builtin().build(&s).unwrap()
}

/// 8x8 single-channel ViT with patch 4, dim 4, depth 1 (under 500 params).
pub fn tiny_vit(id: &str, classes: usize, seed: u64) -> Box<dyn ModelAdapter> {
    let mut s = spec(id, "toy_vit", Family::Vit, classes, 8, 1, seed);
    s.arch_params = json!({"patch": 4, "dim": 4, "depth": 1, "mlp_ratio": 2.0, "use_cls": true});
    ArchRegistry::builtin().build(&s).unwrap()
}

/// Full-size 32x32 RGB toy CNN (native grid 4x4).
pub fn toy_cnn32(id: &str, seed: u64) -> Box<dyn ModelAdapter> {
    let mut s = spec(id, "toy_cnn", Family::Cnn, 10, 32, 3, seed);
    s.arch_params = json!({"channels": [8, 16, 16]});
    ArchRegistry::builtin().build(&s).unwrap()
}

/// Full-size 32x32 RGB toy ViT (native grid 4x4).
pub fn toy_vit32(id: &str, seed: u64) -> Box<dyn ModelAdapter> {
    let mut s = spec(id, "toy_vit", Family::Vit, 10, 32, 3, seed);
    s.arch_params = json!({"patch": 8, "dim": 24, "depth": 2, "mlp_ratio": 2.0, "use_cls": true});
    ArchRegistry::builtin().build(&s).unwrap()
}

/// Random batch in [0, 1].
pub fn rand_batch(b: usize, c: usize, size: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array4::from_shape_fn((b, c, size, size), |_| rng.random::<f64>())
}

pub fn rand_labels(b: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

pub fn param_count(model: &dyn ModelAdapter) -> usize {
    model.named_params().iter().map(|(_, t)| t.len()).sum()
}

/// Wrapper counting forward passes through an adapter.
pub struct Counting<M: ModelAdapter> {
    pub inner: M,
    pub global_calls: Cell<usize>,
    pub local_calls: Cell<usize>,
    pub both_calls: Cell<usize>,
}

impl<M: ModelAdapter> Counting<M> {
    pub fn new(inner: M) -> Self {
        Counting {
            inner,
            global_calls: Cell::new(0),
            local_calls: Cell::new(0),
            both_calls: Cell::new(0),
        }
    }

    pub fn forwards(&self) -> usize {
        self.global_calls.get() + self.local_calls.get() + self.both_calls.get()
    }
}

impl<M: ModelAdapter> ModelAdapter for Counting<M> {
    fn meta(&self) -> &xfer_core::adapters::AdapterMeta {
        self.inner.meta()
    }
    fn arch_name(&self) -> &str {
        self.inner.arch_name()
    }
    fn arch_params(&self) -> serde_json::Value {
        self.inner.arch_params()
    }
    fn native_grid(&self) -> (usize, usize) {
        self.inner.native_grid()
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        self.inner.named_params()
    }
    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor> {
        self.global_calls.set(self.global_calls.get() + 1);
        self.inner.global_logits_t(x)
    }
    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        self.local_calls.set(self.local_calls.get() + 1);
        self.inner.local_logits_t(x, grid)
    }
    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)> {
        self.both_calls.set(self.both_calls.get() + 1);
        self.inner.both_logits_t(x, grid)
    }
    fn backbone_features_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.inner.backbone_features_t(x)
    }
}

/// Boxed adapters need the trait too so tests can wrap them.
pub struct BoxedCounting {
    pub inner: Box<dyn ModelAdapter>,
    pub global_calls: Cell<usize>,
    pub local_calls: Cell<usize>,
    pub both_calls: Cell<usize>,
}

impl BoxedCounting {
    pub fn new(inner: Box<dyn ModelAdapter>) -> Self {
        BoxedCounting {
            inner,
            global_calls: Cell::new(0),
            local_calls: Cell::new(0),
            both_calls: Cell::new(0),
        }
    }

    pub fn forwards(&self) -> usize {
        self.global_calls.get() + self.local_calls.get() + self.both_calls.get()
    }
}

impl ModelAdapter for BoxedCounting {
    fn meta(&self) -> &xfer_core::adapters::AdapterMeta {
        self.inner.meta()
    }
    fn arch_name(&self) -> &str {
        self.inner.arch_name()
    }
    fn arch_params(&self) -> serde_json::Value {
        self.inner.arch_params()
    }
    fn native_grid(&self) -> (usize, usize) {
        self.inner.native_grid()
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        self.inner.named_params()
    }
    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor> {
        self.global_calls.set(self.global_calls.get() + 1);
        self.inner.global_logits_t(x)
    }
    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor> {
        self.local_calls.set(self.local_calls.get() + 1);
        self.inner.local_logits_t(x, grid)
    }
    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)> {
        self.both_calls.set(self.both_calls.get() + 1);
        self.inner.both_logits_t(x, grid)
    }
    fn backbone_features_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.inner.backbone_features_t(x)
    }
}

/// Set a model's parameter by name.
pub fn set_param(model: &dyn ModelAdapter, name: &str, value: ndarray::ArrayD<f64>) {
    let params = model.named_params();
    let (_, t) = params.iter().find(|(n, _)| n == name).expect("param name");
    t.set_data(value);
}

pub fn get_param(model: &dyn ModelAdapter, name: &str) -> ndarray::ArrayD<f64> {
    let params = model.named_params();
    let (_, t) = params.iter().find(|(n, _)| n == name).expect("param name");
    t.value()
}

/// Max |a - b| over two local grids.
pub fn grid_max_diff(a: &LocalFeatureGrid, b: &LocalFeatureGrid) -> f64 {
    a.logits
        .iter()
        .zip(b.logits.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Linear model with identity normalization and a fixed random weight
/// matrix, plus that matrix, so closed-form oracles can recompute its
/// gradients independently.
pub fn fixed_linear(id: &str, pixels: usize, classes: usize, seed: u64) -> (Box<dyn ModelAdapter>, ndarray::Array2<f64>) {
    let mut sp = spec(id, "linear", Family::Cnn, classes, pixels, 1, seed);
    sp.mean = vec![0.0];
    sp.std = vec![1.0];
    let m = ArchRegistry::builtin().build(&sp).unwrap();
    let d = pixels * pixels;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xa0);
    let w = ndarray::Array2::from_shape_fn((d, classes), |_| rng.random::<f64>() * 2.0 - 1.0);
    set_param(m.as_ref(), "weight", w.clone().into_dyn());
    set_param(m.as_ref(), "bias", ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes])));
    (m, w)
}

pub fn softmax_row(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Closed-form cross-entropy input gradient for a linear model: per
/// sample, W (softmax - onehot) / batch, reshaped to the image.
pub fn ce_input_grad(w: &ndarray::Array2<f64>, x: &Array4<f64>, labels: &[usize]) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let d = c * h * wd;
    let classes = w.shape()[1];
    let mut g = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        let flat: Vec<f64> = x.index_axis(ndarray::Axis(0), bi).iter().cloned().collect();
        let logits: Vec<f64> = (0..classes)
            .map(|cl| (0..d).map(|i| flat[i] * w[[i, cl]]).sum())
            .collect();
        let mut p = softmax_row(&logits);
        p[labels[bi]] -= 1.0;
        let mut gi = vec![0.0; d];
        for (i, slot) in gi.iter_mut().enumerate() {
            *slot = (0..classes).map(|cl| w[[i, cl]] * p[cl]).sum::<f64>() / b as f64;
        }
        g.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&ndarray::Array::from_shape_vec((c, h, wd), gi).unwrap());
    }
    g
}

/// Reference per-sample L1-mean gradient normalization.
pub fn l1_mean_normalize_ref(g: &Array4<f64>) -> Array4<f64> {
    let mut out = g.clone();
    for mut s in out.axis_iter_mut(ndarray::Axis(0)) {
        let m = s.iter().map(|v| v.abs()).sum::<f64>() / s.len() as f64;
        if m > 1e-20 {
            s.mapv_inplace(|v| v / m);
        } else {
            s.fill(0.0);
        }
    }
    out
}
