//! Uniform view over classifiers: global class logits plus a spatial grid
//! of local-region logits on a common resolution, with frozen-model
//! evaluation semantics.
//!
//! Architectures register by name in [`ArchRegistry`]; models are built
//! from a [`ModelSpec`] and selected at runtime via the registry file.
//!
//! Adapters are single-threaded objects (the autodiff graph is reference
//! counted, not atomically). Parallel evaluation means one adapter per
//! worker, each restored from its checkpoint; a model must never be
//! trained from two threads.

mod cnn;
mod linear;
mod vit;

pub use cnn::ToyCnn;
pub use linear::LinearModel;
pub use vit::ToyVit;

use crate::error::{Error, Result};
use ndarray::{Array2, Array4, Axis, Ix2, Ix4};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::BTreeMap;
use xfer_tensor::Tensor;

/// Architecture family a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Vit,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Cnn => write!(f, "cnn"),
            Family::Vit => write!(f, "vit"),
        }
    }
}

/// Identity and input contract of an adapter.
#[derive(Debug)]
pub struct AdapterMeta {
    pub model_id: String,
    pub family: Family,
    pub num_classes: usize,
    /// (height, width) in pixels.
    pub input_size: (usize, usize),
    pub channels: usize,
    /// Per-channel normalization constants in [0,1] pixel space, applied
    /// inside the adapter so perturbation budgets stay in raw pixel space.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    trainable: Cell<bool>,
}

impl AdapterMeta {
    pub fn new(
        model_id: impl Into<String>,
        family: Family,
        num_classes: usize,
        input_size: (usize, usize),
        channels: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Self {
        AdapterMeta {
            model_id: model_id.into(),
            family,
            num_classes,
            input_size,
            channels,
            mean,
            std,
            trainable: Cell::new(true),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }
}

/// Spatial grid of per-region class logits.
#[derive(Debug, Clone)]
pub struct LocalFeatureGrid {
    /// (batch, classes, grid_h, grid_w)
    pub logits: Array4<f64>,
    pub grid: (usize, usize),
    pub source_model: String,
}

impl LocalFeatureGrid {
    /// Number of local regions H*W.
    pub fn regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Everything needed to build a freshly initialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub arch: String,
    pub family: Family,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seed: u64,
    /// Architecture-specific hyperparameters (layer widths, patch size, ...).
    #[serde(default)]
    pub arch_params: serde_json::Value,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 || self.channels == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization constants must have one entry per channel ({} expected)",
                self.channels
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std entries must be positive".into()));
        }
        Ok(())
    }
}

/// A classifier exposing global logits and a local-region logit grid.
pub trait ModelAdapter {
    fn meta(&self) -> &AdapterMeta;
    fn arch_name(&self) -> &str;
    fn arch_params(&self) -> serde_json::Value;
    /// Grid the model natively produces local logits on.
    fn native_grid(&self) -> (usize, usize);
    fn named_params(&self) -> Vec<(String, Tensor)>;

    /// Pre-softmax class logits, shape (batch, classes).
    fn global_logits_t(&self, x: &Tensor) -> Result<Tensor>;

    /// Position-wise class logits, shape (batch, classes, h, w). `grid`
    /// selects the output resolution via adaptive average pooling of the
    /// final feature map; `None` keeps the native grid.
    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<Tensor>;

    /// Global and local logits sharing one backbone pass.
    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> Result<(Tensor, Tensor)>;

    /// Final backbone feature map and global logits, for class-activation
    /// mapping. Only CNN-family adapters support this.
    fn backbone_features_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;

    fn model_id(&self) -> &str {
        &self.meta().model_id
    }

    fn family(&self) -> Family {
        self.meta().family
    }

    fn num_classes(&self) -> usize {
        self.meta().num_classes
    }

    fn input_size(&self) -> (usize, usize) {
        self.meta().input_size
    }

    fn is_trainable(&self) -> bool {
        self.meta().trainable()
    }

    /// Mark the model frozen: parameters stop receiving gradients and are
    /// excluded from optimizers. Gradients with respect to inputs remain
    /// available. Idempotent.
    fn freeze(&self) {
        self.meta().trainable.set(false);
        for (_, p) in self.named_params() {
            p.set_requires_grad(false);
        }
    }

    /// Validate an input batch against the adapter's contract.
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.meta();
        if shape.len() != 4 || shape[1] != m.channels || (shape[2], shape[3]) != m.input_size {
            return Err(Error::InputContract(format!(
                "model '{}' expects (batch, {}, {}, {}), got {:?}",
                m.model_id, m.channels, m.input_size.0, m.input_size.1, shape
            )));
        }
        Ok(())
    }

    /// Plain-array global logits for inference.
    fn global_logits(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let t = self.global_logits_t(&Tensor::constant(x.clone().into_dyn()))?;
        Ok(t.value().into_dimensionality::<Ix2>().expect("global logits rank"))
    }

    /// Plain-array global and local logits from one backbone pass.
    fn both_logits(&self, x: &Array4<f64>, grid: Option<(usize, usize)>) -> Result<(Array2<f64>, LocalFeatureGrid)> {
        let (g, l) = self.both_logits_t(&Tensor::constant(x.clone().into_dyn()), grid)?;
        let logits = l.value().into_dimensionality::<Ix4>().expect("local logits rank");
        let gr = (logits.shape()[2], logits.shape()[3]);
        Ok((
            g.value().into_dimensionality::<Ix2>().expect("global logits rank"),
            LocalFeatureGrid {
                logits,
                grid: gr,
                source_model: self.model_id().to_string(),
            },
        ))
    }

    /// Plain-array local logits for inference.
    fn local_logits(&self, x: &Array4<f64>, grid: Option<(usize, usize)>) -> Result<LocalFeatureGrid> {
        let t = self.local_logits_t(&Tensor::constant(x.clone().into_dyn()), grid)?;
        let logits = t.value().into_dimensionality::<Ix4>().expect("local logits rank");
        let g = (logits.shape()[2], logits.shape()[3]);
        Ok(LocalFeatureGrid {
            logits,
            grid: g,
            source_model: self.model_id().to_string(),
        })
    }
}

/// Normalize a raw-pixel input tensor per the adapter contract.
pub(crate) fn normalized_input(meta: &AdapterMeta, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != meta.channels || (shape[2], shape[3]) != meta.input_size {
        return Err(Error::InputContract(format!(
            "model '{}' expects (batch, {}, {}, {}), got {:?}",
            meta.model_id, meta.channels, meta.input_size.0, meta.input_size.1, shape
        )));
    }
    Ok(x.normalize_channels(&meta.mean, &meta.std))
}

/// Apply a linear classifier head position-wise over a feature map:
/// (b, f, h, w) with head (f, c) -> (b, c, h, w).
pub(crate) fn headwise(features: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let sh = features.shape();
    let (bt, f, h, wd) = (sh[0], sh[1], sh[2], sh[3]);
    let c = w.shape()[1];
    features
        .permute(&[0, 2, 3, 1])
        .reshape(&[bt * h * wd, f])
        .matmul(w)
        .add_bias_rows(b)
        .reshape(&[bt, h, wd, c])
        .permute(&[0, 3, 1, 2])
}

/// Validate a requested local grid.
pub(crate) fn check_grid(grid: Option<(usize, usize)>) -> Result<()> {
    if let Some((h, w)) = grid {
        if h == 0 || w == 0 {
            return Err(Error::GridInference("target grid must have h >= 1 and w >= 1".into()));
        }
    }
    Ok(())
}

/// Argmax over the class axis of a (batch, classes) logit array, lowest
/// index winning ties.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

type Builder = fn(&ModelSpec) -> Result<Box<dyn ModelAdapter>>;

/// Name-indexed registry of model architectures.
pub struct ArchRegistry {
    builders: BTreeMap<String, Builder>,
}

impl ArchRegistry {
    pub fn new() -> Self {
        ArchRegistry {
            builders: BTreeMap::new(),
        }
    }

    /// Registry with all built-in architectures.
    pub fn builtin() -> Self {
        let mut r = ArchRegistry::new();
        r.register("linear", linear::build);
        r.register("toy_cnn", cnn::build);
        r.register("toy_vit", vit::build);
        r
    }

    pub fn register(&mut self, name: &str, builder: Builder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(|s| s.as_str()).collect()
    }

    pub fn build(&self, spec: &ModelSpec) -> Result<Box<dyn ModelAdapter>> {
        spec.validate()?;
        let builder = self.builders.get(&spec.arch).ok_or_else(|| {
            Error::UnsupportedArchitecture(format!(
                "unknown architecture '{}'; known: {}",
                spec.arch,
                self.builders.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        builder(spec)
    }
}

impl Default for ArchRegistry {
    fn default() -> Self {
        ArchRegistry::builtin()
    }
}

/// Quick accuracy of a model over a labeled batch, in [0, 1].
pub fn accuracy(model: &dyn ModelAdapter, x: &Array4<f64>, labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    let n = x.shape()[0];
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let xb = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let logits = model.global_logits(&xb)?;
        let preds = argmax_rows(&logits);
        for (p, &y) in preds.iter().zip(&labels[start..end]) {
            if *p == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Convert a batch array into an autodiff input tensor.
pub fn input_batch(x: &Array4<f64>, requires_grad: bool) -> Tensor {
    Tensor::input(x.clone().into_dyn(), requires_grad)
}

