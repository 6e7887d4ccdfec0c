//! Alignment-time adversarial example generation: sign-gradient ascent on
//! the KL divergence between the surrogate's outputs on the perturbed
//! input and the witness's outputs on the clean input, projected onto the
//! epsilon-ball after every step.

use crate::adapters::ModelAdapter;
use crate::alignment::metrics::{GlobalMetric, KlDivergence};
use crate::error::{Error, Result};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use xfer_tensor::Tensor;

use crate::DEFAULT_EPSILON;

/// Generator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfAdvConfig {
    /// Pixel-space L-infinity budget, in (0, 1].
    pub epsilon: f64,
    /// Step size; must not exceed epsilon.
    pub alpha: f64,
    /// Number of sign-gradient iterations.
    pub steps: usize,
    /// Adversarial-to-clean sample ratio in (0, 1]; 1.0 pairs every clean
    /// sample with one adversarial counterpart.
    pub ratio: f64,
}

impl Default for SelfAdvConfig {
    fn default() -> Self {
        SelfAdvConfig {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_EPSILON / 5.0,
            steps: 5,
            ratio: 1.0,
        }
    }
}

impl SelfAdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > 1.0 {
            return Err(Error::Config(format!("epsilon must be in (0, 1], got {}", self.epsilon)));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.alpha > self.epsilon {
            return Err(Error::Config(format!(
                "alpha ({}) must not exceed epsilon ({})",
                self.alpha, self.epsilon
            )));
        }
        if !self.ratio.is_finite() || self.ratio <= 0.0 || self.ratio > 1.0 {
            return Err(Error::Config(format!("ratio must be in (0, 1], got {}", self.ratio)));
        }
        Ok(())
    }
}

/// Which pipeline produced an adversarial batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    SelfAdv,
    Attack,
}

/// Paired clean/adversarial images with the budget they were made under.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub clean: Array4<f64>,
    pub adversarial: Array4<f64>,
    pub labels: Vec<usize>,
    pub budget: f64,
    pub generator: GeneratorKind,
}

impl AdversarialBatch {
    /// Budget slack tolerated when validating the L-infinity invariant.
    pub const TOL: f64 = 1e-8;

    pub fn new(
        clean: Array4<f64>,
        adversarial: Array4<f64>,
        labels: Vec<usize>,
        budget: f64,
        generator: GeneratorKind,
    ) -> Result<Self> {
        if clean.shape() != adversarial.shape() {
            return Err(Error::InputContract(format!(
                "clean {:?} and adversarial {:?} shapes differ",
                clean.shape(),
                adversarial.shape()
            )));
        }
        if labels.len() != clean.shape()[0] {
            return Err(Error::InputContract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                clean.shape()[0]
            )));
        }
        let batch = AdversarialBatch {
            clean,
            adversarial,
            labels,
            budget,
            generator,
        };
        batch.check_invariants()?;
        Ok(batch)
    }

    /// Verify the L-infinity bound and the [0, 1] pixel range.
    pub fn check_invariants(&self) -> Result<()> {
        let linf = self.max_linf();
        if linf > self.budget + Self::TOL {
            return Err(Error::InputContract(format!(
                "perturbation L-inf {} exceeds budget {}",
                linf, self.budget
            )));
        }
        if self.adversarial.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InputContract("adversarial pixels outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Largest per-pixel perturbation magnitude in the batch.
    pub fn max_linf(&self) -> f64 {
        self.clean
            .iter()
            .zip(self.adversarial.iter())
            .map(|(c, a)| (c - a).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over samples of each sample's L-infinity perturbation.
    pub fn mean_linf(&self) -> f64 {
        let n = self.clean.shape()[0];
        if n == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let c = self.clean.index_axis(ndarray::Axis(0), i);
            let a = self.adversarial.index_axis(ndarray::Axis(0), i);
            acc += c
                .iter()
                .zip(a.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        }
        acc / n as f64
    }

    pub fn len(&self) -> usize {
        self.clean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Project `x_adv` onto the epsilon-ball around `x` intersected with the
/// valid pixel range [0, 1]. Idempotent.
pub fn project(x_adv: &Array4<f64>, x: &Array4<f64>, epsilon: f64) -> Result<Array4<f64>> {
    if epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if x_adv.shape() != x.shape() {
        return Err(Error::InputContract(format!(
            "projection shapes differ: {:?} vs {:?}",
            x_adv.shape(),
            x.shape()
        )));
    }
    let mut out = x_adv.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|o, &c| {
        *o = o.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
    });
    Ok(out)
}

/// Sign with sign(0) = 0, applied elementwise.
pub fn sign(a: &Array4<f64>) -> Array4<f64> {
    a.mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Side information from one generate call, fed into run diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct GenerateStats {
    pub mean_linf: f64,
    pub final_kl: f64,
}

/// Generate self-adversarial examples. Witness logits are computed once on
/// the clean input and anchor every iteration; the surrogate is forwarded
/// afresh each step and only input gradients are used. The output carries
/// no gradient.
///
/// With `ratio < 1` only the leading `ceil(ratio * batch)` samples get
/// adversarial counterparts and the returned batch is that subset.
pub fn generate(
    x: &Array4<f64>,
    labels: &[usize],
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    cfg: &SelfAdvConfig,
) -> Result<(AdversarialBatch, GenerateStats)> {
    cfg.validate()?;
    if surrogate.num_classes() != witness.num_classes() {
        return Err(Error::ClassSpace(format!(
            "surrogate has {} classes, witness has {}",
            surrogate.num_classes(),
            witness.num_classes()
        )));
    }
    let b = x.shape()[0];
    let n_adv = ((cfg.ratio * b as f64).ceil() as usize).clamp(1, b);
    let clean = x.slice(ndarray::s![0..n_adv, .., .., ..]).to_owned();
    let labels: Vec<usize> = if labels.is_empty() {
        vec![0; n_adv]
    } else {
        labels[..n_adv].to_vec()
    };

    // one witness forward pass per call: logits on the clean input
    let w_logits = witness.global_logits(&clean)?;

    let kl = KlDivergence;
    let mut x_adv = clean.clone();
    for _ in 0..cfg.steps {
        let xt = Tensor::input(x_adv.clone().into_dyn(), true);
        let s_logits = surrogate.global_logits_t(&xt)?;
        let loss = kl.loss(&s_logits, &w_logits, 1.0);
        loss.backward();
        let g = xt.grad().expect("input gradient");
        check_finite_grad(&g, n_adv)?;
        let g4 = g.into_dimensionality::<ndarray::Ix4>().expect("input grad rank");
        let stepped = &x_adv + &(sign(&g4) * cfg.alpha);
        x_adv = project(&stepped, &clean, cfg.epsilon)?;
    }

    let final_kl = kl_value(&surrogate.global_logits(&x_adv)?, &w_logits);
    let batch = AdversarialBatch::new(clean, x_adv, labels, cfg.epsilon, GeneratorKind::SelfAdv)?;
    let stats = GenerateStats {
        mean_linf: batch.mean_linf(),
        final_kl,
    };
    Ok((batch, stats))
}

fn check_finite_grad(g: &xfer_tensor::Arr, batch: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let per_sample = g.len() / batch;
    let offending = g
        .as_slice()
        .map(|s| s.iter().position(|v| !v.is_finite()).unwrap_or(0) / per_sample)
        .unwrap_or(0);
    Err(Error::Generation {
        batch_index: offending,
        message: "non-finite input gradient (saturated logits?)".into(),
    })
}

/// Plain KL(p_w || p_s) between two logit batches, mean over the batch.
pub fn kl_value(surrogate_logits: &Array2<f64>, witness_logits: &Array2<f64>) -> f64 {
    let kl = KlDivergence;
    kl.loss(&Tensor::constant(surrogate_logits.clone().into_dyn()), witness_logits, 1.0)
        .value_scalar()
}
