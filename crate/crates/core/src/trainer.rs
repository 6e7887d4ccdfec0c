//! Fine-tunes the surrogate by momentum SGD on the alignment loss,
//! managing epochs, checkpoints, divergence rollback and run manifests.
//! Also hosts the plain cross-entropy pretraining loop for toy models.
//!
//! One alignment run owns its surrogate exclusively; gradient steps are
//! strictly sequential. Independent runs parallelize as separate
//! processes.

use crate::adapters::{argmax_rows, ModelAdapter};
use crate::alignment::{alignment_loss_t, AlignmentConfig, LossDiagnostics};
use crate::checkpoint;
use crate::data::LabeledImageSource;
use crate::error::{Error, Result};
use crate::selfadv::SelfAdvConfig;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;
use xfer_tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    /// Classical momentum decay in [0, 1).
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub device: Device,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 1,
            batch_size: 64,
            seed: 0,
            device: Device::Cpu,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.device == Device::Accelerator {
            return Err(Error::Config("device 'accelerator' is not available in this build; use cpu".into()));
        }
        Ok(())
    }
}

/// Classical momentum SGD: v <- mu * v + g; theta <- theta - eta * v.
pub struct SgdMomentum {
    lr: f64,
    mu: f64,
    velocity: Vec<Option<ArrayD<f64>>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, mu: f64, n_params: usize) -> Self {
        SgdMomentum {
            lr,
            mu,
            velocity: vec![None; n_params],
        }
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Frozen or gradient-free parameters are skipped.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer bound to a different parameter list");
        for (slot, p) in self.velocity.iter_mut().zip(params) {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            let v = match slot.take() {
                Some(mut v) => {
                    v.mapv_inplace(|x| x * self.mu);
                    v += &g;
                    v
                }
                None => g,
            };
            p.update_data(|d| *d -= &(&v * self.lr));
            *slot = Some(v);
        }
    }
}

pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_global: f64,
    pub mean_local: f64,
    pub mean_global_adv: f64,
    pub mean_local_adv: f64,
}

/// Everything needed to replay an alignment run bit-for-bit on the same
/// hardware class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub surrogate_id: String,
    pub witness_id: String,
    pub alignment: AlignmentConfig,
    pub self_adv: SelfAdvConfig,
    pub trainer: TrainerConfig,
    pub dataset_fingerprint: String,
    pub dataset_len: usize,
    pub code_version: String,
    pub wall_clock_secs: f64,
    pub epochs: Vec<EpochStats>,
    pub initial_checkpoint: String,
    pub aligned_checkpoint: String,
}

#[derive(Serialize)]
struct DiagRecord<'a> {
    step: usize,
    #[serde(flatten)]
    diag: &'a LossDiagnostics,
}

/// Align the surrogate to the frozen witness over the dataset. The
/// surrogate's parameters are updated in place; the initial weights are
/// preserved as a checkpoint under `out_dir`, and a manifest plus a
/// per-step diagnostics log are written there.
pub fn align(
    surrogate: &dyn ModelAdapter,
    witness: &dyn ModelAdapter,
    data: &LabeledImageSource,
    acfg: &AlignmentConfig,
    scfg: &SelfAdvConfig,
    tcfg: &TrainerConfig,
    out_dir: &Path,
) -> Result<RunManifest> {
    acfg.validate()?;
    scfg.validate()?;
    tcfg.validate()?;
    if surrogate.num_classes() != witness.num_classes() || surrogate.num_classes() != data.class_count() {
        return Err(Error::Config(format!(
            "class spaces differ: surrogate {}, witness {}, dataset {}",
            surrogate.num_classes(),
            witness.num_classes(),
            data.class_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("alignment dataset is empty".into()));
    }
    witness.freeze();

    fs::create_dir_all(out_dir)?;
    let initial_path = out_dir.join("checkpoint_initial.ckpt");
    let initial_hash = checkpoint::save(surrogate, &initial_path)?;
    let mut last_good = initial_path.clone();

    let diag_path = out_dir.join("diagnostics.jsonl");
    let mut diag_file = std::io::BufWriter::new(fs::File::create(&diag_path)?);

    let params: Vec<Tensor> = surrogate.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = SgdMomentum::new(tcfg.learning_rate, tcfg.momentum, params.len());

    let start = Instant::now();
    let mut epoch_stats = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let order = data.shuffled_indices(tcfg.seed.wrapping_add(epoch as u64));
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let (x, _y) = data.batch(chunk)?;
            let (loss, diag) = alignment_loss_t(&x, surrogate, witness, acfg, scfg)?;
            if !diag.total.is_finite() {
                checkpoint::restore_into(&last_good, surrogate)?;
                return Err(Error::Diverged(format!(
                    "loss became non-finite at step {step}; restored {}",
                    last_good.display()
                )));
            }
            zero_grads(&params);
            loss.backward();
            opt.step(&params);
            zero_grads(&params);

            serde_json::to_writer(&mut diag_file, &DiagRecord { step, diag: &diag })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            diag_file.write_all(b"\n")?;

            sums[0] += diag.total;
            sums[1] += diag.l_global;
            sums[2] += diag.l_local;
            sums[3] += diag.l_global_adv;
            sums[4] += diag.l_local_adv;
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        epoch_stats.push(EpochStats {
            epoch,
            mean_total: sums[0] / n,
            mean_global: sums[1] / n,
            mean_local: sums[2] / n,
            mean_global_adv: sums[3] / n,
            mean_local_adv: sums[4] / n,
        });
        let epoch_path = out_dir.join("checkpoint_lastgood.ckpt");
        checkpoint::save(surrogate, &epoch_path)?;
        last_good = epoch_path;
    }
    diag_file.flush()?;

    let aligned_path = out_dir.join("checkpoint_aligned.ckpt");
    let aligned_hash = checkpoint::save(surrogate, &aligned_path)?;

    let manifest = RunManifest {
        surrogate_id: surrogate.model_id().to_string(),
        witness_id: witness.model_id().to_string(),
        alignment: acfg.clone(),
        self_adv: scfg.clone(),
        trainer: tcfg.clone(),
        dataset_fingerprint: data.fingerprint()?,
        dataset_len: data.len(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        epochs: epoch_stats,
        initial_checkpoint: initial_hash,
        aligned_checkpoint: aligned_hash,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest encodes"),
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training for toy models. Returns per-epoch
/// mean training loss.
pub fn pretrain(model: &dyn ModelAdapter, data: &LabeledImageSource, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if model.num_classes() != data.class_count() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            data.class_count()
        )));
    }
    if !model.is_trainable() {
        return Err(Error::Config(format!("model '{}' is frozen", model.model_id())));
    }
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, params.len());
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = data.shuffled_indices(cfg.seed.wrapping_add(epoch as u64));
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let logits = model.global_logits_t(&Tensor::constant(x.into_dyn()))?;
            let loss = logits.log_softmax_last().nll_mean(&y);
            sum += loss.value_scalar();
            n += 1;
            zero_grads(&params);
            loss.backward();
            opt.step(&params);
            zero_grads(&params);
        }
        losses.push(sum / n as f64);
    }
    Ok(losses)
}

/// Accuracy of a model over a whole split, in [0, 1].
pub fn accuracy_on(model: &dyn ModelAdapter, data: &LabeledImageSource) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.global_logits(&x)?;
        let preds = argmax_rows(&logits);
        correct += preds.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
