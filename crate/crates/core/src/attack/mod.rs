//! Composable sign-gradient transfer attacks: iterative FGSM core with
//! optional momentum accumulation, Nesterov look-ahead, input diversity,
//! translation-invariant gradient smoothing and ensemble logit fusion.
//! Named presets compose these pieces; hyphenated names stack them
//! ("di-ti-mi").

pub mod transforms;

pub use transforms::{diversity_transform, diversity_transform_t, gaussian_kernel, translation_smooth};

use crate::adapters::ModelAdapter;
use crate::error::{Error, Result};
use crate::selfadv::{project, sign, AdversarialBatch, GeneratorKind};
use crate::DEFAULT_EPSILON;
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use xfer_tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    pub enabled: bool,
    /// Smallest resize target, in pixels.
    pub resize_low: usize,
    /// Largest resize target, in pixels.
    pub resize_high: usize,
    /// Probability of applying the transform at each iteration.
    pub prob: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            enabled: false,
            resize_low: 28,
            resize_high: 32,
            prob: 0.5,
        }
    }
}

/// Description of one attack pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// L-infinity budget in pixel space.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size per iteration.
    pub alpha: f64,
    /// Momentum decay; 0 disables accumulation.
    pub mu: f64,
    pub nesterov: bool,
    pub diversity: DiversityConfig,
    /// Odd kernel side for translation-invariant smoothing; 1 disables it.
    pub translation_kernel: usize,
    /// Declared ensemble member ids (bookkeeping for manifests).
    pub ensemble: Vec<String>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            alpha: DEFAULT_EPSILON / 10.0,
            mu: 1.0,
            nesterov: false,
            diversity: DiversityConfig::default(),
            translation_kernel: 1,
            ensemble: Vec::new(),
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > 1.0 {
            return Err(Error::Config(format!("epsilon must be in (0, 1], got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.translation_kernel == 0 || self.translation_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "translation_kernel must be odd and >= 1, got {}",
                self.translation_kernel
            )));
        }
        if self.diversity.enabled {
            if self.diversity.resize_low > self.diversity.resize_high {
                return Err(Error::Config(format!(
                    "diversity resize_low {} > resize_high {}",
                    self.diversity.resize_low, self.diversity.resize_high
                )));
            }
            if self.diversity.resize_low == 0 {
                return Err(Error::Config("diversity resize_low must be >= 1".into()));
            }
            if !(0.0..=1.0).contains(&self.diversity.prob) {
                return Err(Error::Config(format!(
                    "diversity prob must be in [0, 1], got {}",
                    self.diversity.prob
                )));
            }
        }
        Ok(())
    }
}

/// Craft adversarial examples against the fused (logit-mean) ensemble,
/// maximizing cross-entropy against the ground-truth labels. Every model
/// is treated as frozen; only input gradients are used.
pub fn craft(
    x: &Array4<f64>,
    labels: &[usize],
    models: &[&dyn ModelAdapter],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    if models.is_empty() {
        return Err(Error::Config("attack needs at least one model in the ensemble".into()));
    }
    let classes = models[0].num_classes();
    for m in models {
        if m.num_classes() != classes {
            return Err(Error::ClassSpace(format!(
                "ensemble members disagree on classes: '{}' has {}, '{}' has {}",
                models[0].model_id(),
                classes,
                m.model_id(),
                m.num_classes()
            )));
        }
        m.check_input(x.shape())?;
    }
    let b = x.shape()[0];
    if labels.len() != b {
        return Err(Error::InputContract(format!("{} labels for a batch of {}", labels.len(), b)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::ClassSpace(format!("label {bad} out of range for {classes} classes")));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x_adv = x.clone();
    let mut momentum = Array4::<f64>::zeros(x.raw_dim());

    for _ in 0..spec.steps {
        let x_in = if spec.nesterov && spec.mu > 0.0 {
            &x_adv + &(&momentum * (spec.alpha * spec.mu))
        } else {
            x_adv.clone()
        };
        let xt = Tensor::input(x_in.into_dyn(), true);
        let fed = if spec.diversity.enabled {
            diversity_transform_t(&xt, spec.diversity.resize_low, spec.diversity.resize_high, spec.diversity.prob, &mut rng)?
        } else {
            xt.clone()
        };

        let mut fused: Option<Tensor> = None;
        for m in models {
            let logits = m.global_logits_t(&fed)?;
            fused = Some(match fused {
                Some(acc) => acc.add(&logits),
                None => logits,
            });
        }
        let fused = fused.unwrap().mul_scalar(1.0 / models.len() as f64);
        let loss = fused.log_softmax_last().nll_mean(labels);
        loss.backward();
        let grad = xt
            .grad()
            .expect("input gradient")
            .into_dimensionality::<ndarray::Ix4>()
            .expect("input grad rank");
        if grad.iter().any(|v| !v.is_finite()) {
            let idx = nonfinite_sample(&grad);
            return Err(Error::Generation {
                batch_index: idx,
                message: "non-finite attack gradient".into(),
            });
        }

        let grad = if spec.translation_kernel > 1 {
            translation_smooth(&grad, spec.translation_kernel)?
        } else {
            grad
        };

        // per-sample L1-mean normalization before momentum accumulation
        let normalized = l1_mean_normalize(&grad);
        momentum.mapv_inplace(|v| v * spec.mu);
        momentum += &normalized;

        let stepped = &x_adv + &(sign(&momentum) * spec.alpha);
        x_adv = project(&stepped, x, spec.epsilon)?;
    }

    AdversarialBatch::new(x.clone(), x_adv, labels.to_vec(), spec.epsilon, GeneratorKind::Attack)
}

fn l1_mean_normalize(grad: &Array4<f64>) -> Array4<f64> {
    let mut out = grad.clone();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        let mean_abs = sample.iter().map(|v| v.abs()).sum::<f64>() / sample.len() as f64;
        if mean_abs > 1e-20 {
            sample.mapv_inplace(|v| v / mean_abs);
        } else {
            sample.fill(0.0);
        }
    }
    out
}

fn nonfinite_sample(grad: &Array4<f64>) -> usize {
    for (i, sample) in grad.axis_iter(Axis(0)).enumerate() {
        if sample.iter().any(|v| !v.is_finite()) {
            return i;
        }
    }
    0
}

/// Build an [`AttackSpec`] from a hyphenated preset name. Components:
///
/// * `fgsm`    - single step at full budget
/// * `ifgsm`   - iterative baseline (mu = 0)
/// * `mi`      - momentum accumulation (mu = 1)
/// * `ni`      - Nesterov look-ahead on top of momentum
/// * `di`      - input diversity (resize range scales with input size)
/// * `ti`      - translation-invariant gradient smoothing
///
/// Example: `di-ti-mi`.
pub fn preset(name: &str, input_size: (usize, usize)) -> Result<AttackSpec> {
    let mut spec = AttackSpec {
        mu: 0.0,
        ..AttackSpec::default()
    };
    if name.is_empty() {
        return Err(Error::Config("empty attack name".into()));
    }
    for part in name.split('-') {
        match part {
            "fgsm" => {
                spec.steps = 1;
                spec.alpha = spec.epsilon;
                spec.mu = 0.0;
            }
            "ifgsm" => {
                spec.mu = 0.0;
            }
            "mi" => {
                spec.mu = 1.0;
            }
            "ni" => {
                spec.mu = 1.0;
                spec.nesterov = true;
            }
            "di" => {
                let side = input_size.0.min(input_size.1);
                spec.diversity = DiversityConfig {
                    enabled: true,
                    resize_low: ((side as f64) * 0.875).round().max(1.0) as usize,
                    resize_high: side,
                    prob: 0.5,
                };
            }
            "ti" => {
                spec.translation_kernel = 5;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown attack component '{other}' in '{name}' (fgsm|ifgsm|mi|ni|di|ti)"
                )));
            }
        }
    }
    Ok(spec)
}

/// Names of the attack components accepted by [`preset`].
pub fn preset_components() -> &'static [&'static str] {
    &["fgsm", "ifgsm", "mi", "ni", "di", "ti"]
}
