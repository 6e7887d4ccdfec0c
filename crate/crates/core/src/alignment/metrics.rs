//! Pluggable divergence metrics for global-logit alignment, selected by
//! name at runtime. The default is forward KL from the witness
//! distribution to the surrogate distribution; JS, TV and an InfoNCE-style
//! contrastive loss are available behind the same signature.

use ndarray::{Array2, Axis};
use std::collections::BTreeMap;
use xfer_tensor::ops::log_softmax_arr;
use xfer_tensor::{Arr, Tensor};

use crate::error::{Error, Result};

/// Divergence between a constant witness logit batch (the reference) and
/// a differentiable surrogate logit batch, averaged over the batch.
pub trait GlobalMetric {
    fn name(&self) -> &'static str;
    fn loss(&self, surrogate_logits: &Tensor, witness_logits: &Array2<f64>, temperature: f64) -> Tensor;
}

fn witness_log_probs(witness_logits: &Array2<f64>, temperature: f64) -> Arr {
    log_softmax_arr(&(witness_logits / temperature).into_dyn())
}

/// KL(p_w || p_s): the reference distribution is the witness's.
pub struct KlDivergence;

impl GlobalMetric for KlDivergence {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn loss(&self, surrogate_logits: &Tensor, witness_logits: &Array2<f64>, temperature: f64) -> Tensor {
        let batch = witness_logits.shape()[0] as f64;
        let lnp = witness_log_probs(witness_logits, temperature);
        let p = lnp.mapv(f64::exp);
        let entropy_sum = (&p * &lnp).sum();
        let lnq = surrogate_logits.mul_scalar(1.0 / temperature).log_softmax_last();
        let cross_sum = lnq.mul_const(&p).sum_all();
        // sum p (ln p - ln q), mean over batch; exactly zero on identical logits
        cross_sum.neg().add_scalar(entropy_sum).mul_scalar(1.0 / batch)
    }
}

/// Jensen-Shannon divergence.
pub struct JsDivergence;

impl GlobalMetric for JsDivergence {
    fn name(&self) -> &'static str {
        "js"
    }

    fn loss(&self, surrogate_logits: &Tensor, witness_logits: &Array2<f64>, temperature: f64) -> Tensor {
        const TINY: f64 = 1e-300; // keeps ln away from exact zeros after underflow
        let batch = witness_logits.shape()[0] as f64;
        let lnp = witness_log_probs(witness_logits, temperature);
        let p = lnp.mapv(f64::exp);
        let entropy_sum = (&p * &lnp).sum();
        let q = surrogate_logits.mul_scalar(1.0 / temperature).softmax_last();
        let m = q.mul_scalar(0.5).add_const(&(&p * 0.5));
        let lnm = m.add_scalar(TINY).ln();
        // sum p (ln p - ln m)
        let t1 = lnm.mul_const(&p).sum_all().neg().add_scalar(entropy_sum);
        // sum q (ln q - ln m)
        let t2 = q.mul(&q.add_scalar(TINY).ln().sub(&lnm)).sum_all();
        t1.add(&t2).mul_scalar(0.5 / batch)
    }
}

/// Total variation distance: half the L1 distance between the softmaxes.
pub struct TotalVariation;

impl GlobalMetric for TotalVariation {
    fn name(&self) -> &'static str {
        "tv"
    }

    fn loss(&self, surrogate_logits: &Tensor, witness_logits: &Array2<f64>, temperature: f64) -> Tensor {
        let batch = witness_logits.shape()[0] as f64;
        let p = witness_log_probs(witness_logits, temperature).mapv(f64::exp);
        let q = surrogate_logits.mul_scalar(1.0 / temperature).softmax_last();
        q.add_const(&(-&p)).abs().sum_all().mul_scalar(0.5 / batch)
    }
}

/// InfoNCE-style contrastive alignment over the batch: each surrogate
/// logit vector must identify its own witness counterpart among the
/// batch under cosine similarity. Nonnegative, but not zero for
/// identical inputs (a contrastive loss has no self-zero property).
pub struct NceLoss;

impl GlobalMetric for NceLoss {
    fn name(&self) -> &'static str {
        "nce"
    }

    fn loss(&self, surrogate_logits: &Tensor, witness_logits: &Array2<f64>, temperature: f64) -> Tensor {
        let n = witness_logits.shape()[0];
        let mut wn = witness_logits.clone();
        for mut row in wn.axis_iter_mut(Axis(0)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        let sn = surrogate_logits.l2_normalize_rows(1e-12);
        let sims = sn
            .matmul(&Tensor::constant(wn.t().as_standard_layout().to_owned().into_dyn()))
            .mul_scalar(1.0 / temperature);
        let labels: Vec<usize> = (0..n).collect();
        sims.log_softmax_last().nll_mean(&labels)
    }
}

/// Name-indexed registry of global alignment metrics.
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn GlobalMetric>>,
}

impl MetricRegistry {
    pub fn builtin() -> Self {
        let mut metrics: BTreeMap<String, Box<dyn GlobalMetric>> = BTreeMap::new();
        for m in [
            Box::new(KlDivergence) as Box<dyn GlobalMetric>,
            Box::new(JsDivergence),
            Box::new(TotalVariation),
            Box::new(NceLoss),
        ] {
            metrics.insert(m.name().to_string(), m);
        }
        MetricRegistry { metrics }
    }

    pub fn get(&self, name: &str) -> Result<&dyn GlobalMetric> {
        self.metrics
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown global metric '{}'; known: {}",
                    name,
                    self.metrics.keys().cloned().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.keys().map(|s| s.as_str()).collect()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        MetricRegistry::builtin()
    }
}
