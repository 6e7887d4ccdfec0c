//! The alignment loss stack: global divergence on logits, local
//! pseudo-label cross-entropy over the spatial grid, their weighted
//! combination on clean inputs, the same combination on self-adversarial
//! inputs, and the total loss that the trainer descends.

pub mod metrics;

pub use metrics::{GlobalMetric, MetricRegistry};

use crate::adapters::{LocalFeatureGrid, ModelAdapter};
use crate::error::{Error, Result};
use crate::selfadv::{self, SelfAdvConfig};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use xfer_tensor::Tensor;

/// Weights and metric selection for the alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Spatial factor weighting the local term on clean inputs.
    pub gamma: f64,
    /// Adversarial factor weighting the local term on adversarial inputs.
    pub omega: f64,
    /// Alignment factor mixing the adversarial-aware term into the total.
    pub kappa: f64,
    /// Global divergence metric name: kl | js | tv | nce.
    pub global_metric: String,
    /// Softmax temperature for the global metric.
    pub temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            gamma: 0.2,
            omega: 0.02,
            kappa: 0.02,
            global_metric: "kl".into(),
            temperature: 1.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("omega", self.omega), ("kappa", self.kappa)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        MetricRegistry::builtin().get(&self.global_metric)?;
        Ok(())
    }
}

/// Hard per-region labels derived from a witness's local logits.
#[derive(Debug, Clone)]
pub struct PseudoLabelGrid {
    /// (batch, grid_h, grid_w), entries in [0, classes).
    pub labels: Array3<usize>,
    pub source: String,
}

/// Per-region argmax with lowest-index tie-breaking. Carries no gradient.
pub fn pseudo_labels(witness_local: &LocalFeatureGrid) -> PseudoLabelGrid {
    let l = &witness_local.logits;
    let (b, c, h, w) = l.dim();
    let mut labels = Array3::<usize>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut bv = f64::NEG_INFINITY;
                for ci in 0..c {
                    let v = l[[bi, ci, y, x]];
                    if v > bv {
                        bv = v;
                        best = ci;
                    }
                }
                labels[[bi, y, x]] = best;
            }
        }
    }
    PseudoLabelGrid {
        labels,
        source: witness_local.source_model.clone(),
    }
}

/// Graph-building global alignment loss. The witness batch is the
/// constant reference; the result is differentiable in the surrogate
/// logits.
pub fn global_alignment_loss_t(
    surrogate_logits: &Tensor,
    witness_logits: &Array2<f64>,
    cfg: &AlignmentConfig,
) -> Result<Tensor> {
    let s_shape = surrogate_logits.shape();
    if s_shape != witness_logits.shape().to_vec() {
        return Err(Error::ClassSpace(format!(
            "surrogate logits {:?} vs witness logits {:?}: models must share the label space",
            s_shape,
            witness_logits.shape()
        )));
    }
    let metric = MetricRegistry::builtin();
    Ok(metric.get(&cfg.global_metric)?.loss(surrogate_logits, witness_logits, cfg.temperature))
}

/// Value form of the global alignment loss.
pub fn global_alignment_loss(
    surrogate_logits: &Array2<f64>,
    witness_logits: &Array2<f64>,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let t = Tensor::constant(surrogate_logits.clone().into_dyn());
    Ok(global_alignment_loss_t(&t, witness_logits, cfg)?.value_scalar())
}

/// Graph-building local alignment loss: mean over regions of the
/// batch-mean cross-entropy between surrogate local logits and witness
/// pseudo-labels.
pub fn local_alignment_loss_t(surrogate_local: &Tensor, pseudo: &PseudoLabelGrid) -> Result<Tensor> {
    let sh = surrogate_local.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (pb, ph, pw) = pseudo.labels.dim();
    if (b, h, w) != (pb, ph, pw) {
        return Err(Error::SpatialAlignment(format!(
            "surrogate grid ({b}, {h}, {w}) vs pseudo-label grid ({pb}, {ph}, {pw}); \
             pool the witness grid to the surrogate grid first"
        )));
    }
    if let Some(&bad) = pseudo.labels.iter().find(|&&l| l >= c) {
        return Err(Error::ClassSpace(format!("pseudo-label {bad} out of range for {c} classes")));
    }
    // (b, c, h, w) -> (b*h*w, c) rows paired with row-major flattened labels
    let rows = surrogate_local.permute(&[0, 2, 3, 1]).reshape(&[b * h * w, c]);
    let flat: Vec<usize> = pseudo.labels.iter().cloned().collect();
    Ok(rows.log_softmax_last().nll_mean(&flat))
}

/// Value form of the local alignment loss.
pub fn local_alignment_loss(surrogate_local: &LocalFeatureGrid, pseudo: &PseudoLabelGrid) -> Result<f64> {
    let t = Tensor::constant(surrogate_local.logits.clone().into_dyn());
    Ok(local_alignment_loss_t(&t, pseudo)?.value_scalar())
}

/// global + factor * local; the composition rule shared by the clean and
/// adversarial branches.
pub fn weighted_combine(global: f64, local: f64, factor: f64) -> f64 {
    global + factor * local
}

/// One clean or adversarial branch of the alignment loss: the global term
/// plus `factor` times the local term, with the witness's local grid
/// pooled to the surrogate's native grid.
fn branch_loss_t(
    x: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
    factor: f64,
) -> Result<(Tensor, f64, f64)> {
    if surrogate.num_classes() != witness.num_classes() {
        return Err(Error::ClassSpace(format!(
            "surrogate has {} classes, witness has {}",
            surrogate.num_classes(),
            witness.num_classes()
        )));
    }
    let grid = surrogate.native_grid();
    let xt = Tensor::constant(x.clone().into_dyn());
    let (s_global, s_local) = surrogate.both_logits_t(&xt, None)?;
    let (w_global, w_local) = witness.both_logits(x, Some(grid))?;
    let pseudo = pseudo_labels(&w_local);
    let lg = global_alignment_loss_t(&s_global, &w_global, cfg)?;
    let ll = local_alignment_loss_t(&s_local, &pseudo)?;
    let (gv, lv) = (lg.value_scalar(), ll.value_scalar());
    Ok((lg.add(&ll.mul_scalar(factor)), gv, lv))
}

/// Spatial-aware loss on clean inputs: global + gamma * local.
pub fn spatial_aware_loss_t(
    x: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
) -> Result<(Tensor, f64, f64)> {
    branch_loss_t(x, surrogate, witness, cfg, cfg.gamma)
}

pub fn spatial_aware_loss(
    x: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    Ok(spatial_aware_loss_t(x, surrogate, witness, cfg)?.0.value_scalar())
}

/// Adversarial-aware loss on already-generated adversarial inputs:
/// global + omega * local, with witness logits recomputed on the
/// adversarial batch.
pub fn adversarial_aware_loss_t(
    x_adv: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
) -> Result<(Tensor, f64, f64)> {
    branch_loss_t(x_adv, surrogate, witness, cfg, cfg.omega)
}

pub fn adversarial_aware_loss(
    x_adv: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    Ok(adversarial_aware_loss_t(x_adv, surrogate, witness, cfg)?.0.value_scalar())
}

/// Per-step loss record, serialized one JSON object per line into run logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub l_global: f64,
    pub l_local: f64,
    pub l_global_adv: f64,
    pub l_local_adv: f64,
    pub gamma: f64,
    pub omega: f64,
    pub kappa: f64,
    pub total: f64,
    /// Mean L-infinity magnitude of the generated perturbations.
    pub adv_mean_linf: f64,
    /// KL divergence at the final generator iterate.
    pub adv_final_kl: f64,
}

impl LossDiagnostics {
    /// Recompose the total from the recorded parts.
    pub fn recompose(&self) -> f64 {
        weighted_combine(self.l_global, self.l_local, self.gamma)
            + self.kappa * weighted_combine(self.l_global_adv, self.l_local_adv, self.omega)
    }
}

/// The full alignment loss: spatial-aware on clean inputs plus kappa times
/// the adversarial-aware branch on self-adversarial inputs. When kappa is
/// zero the generator never runs.
pub fn alignment_loss_t(
    x: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
    adv_cfg: &SelfAdvConfig,
) -> Result<(Tensor, LossDiagnostics)> {
    cfg.validate()?;
    let (sa, l_global, l_local) = spatial_aware_loss_t(x, surrogate, witness, cfg)?;
    let mut diag = LossDiagnostics {
        l_global,
        l_local,
        l_global_adv: 0.0,
        l_local_adv: 0.0,
        gamma: cfg.gamma,
        omega: cfg.omega,
        kappa: cfg.kappa,
        total: sa.value_scalar(),
        adv_mean_linf: 0.0,
        adv_final_kl: 0.0,
    };
    if cfg.kappa == 0.0 {
        return Ok((sa, diag));
    }
    let (batch, stats) = selfadv::generate(x, &[], surrogate, witness, adv_cfg)?;
    let (aa, l_global_adv, l_local_adv) = adversarial_aware_loss_t(&batch.adversarial, surrogate, witness, cfg)?;
    let total = sa.add(&aa.mul_scalar(cfg.kappa));
    diag.l_global_adv = l_global_adv;
    diag.l_local_adv = l_local_adv;
    diag.total = total.value_scalar();
    diag.adv_mean_linf = stats.mean_linf;
    diag.adv_final_kl = stats.final_kl;
    Ok((total, diag))
}

/// Value form of the full alignment loss.
pub fn alignment_loss(
    x: &Array4<f64>,
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &AlignmentConfig,
    adv_cfg: &SelfAdvConfig,
) -> Result<(f64, LossDiagnostics)> {
    let (t, d) = alignment_loss_t(x, surrogate, witness, cfg, adv_cfg)?;
    Ok((t.value_scalar(), d))
}
