//! Subcommand implementations.

use clap::Args;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use xfer_core::adapters::{ArchRegistry, Family, ModelAdapter, ModelSpec};
use xfer_core::attack::{craft, preset};
use xfer_core::config::{entry_for, ModelRegistry, RunConfig};
use xfer_core::data::{generate_synthetic, load_dataset, ImagePolicy, Split, SyntheticSpec};
use xfer_core::error::{Error, Result};
use xfer_core::eval::{
    cosine_similarity_report, gradcam as compute_gradcam, transfer_matrix, AdvProvenance, AlignState,
};
use xfer_core::trainer::{accuracy_on, PretrainConfig};
use xfer_core::{archive, checkpoint};

fn load_registry(path: &Path) -> Result<(ModelRegistry, PathBuf)> {
    let registry = ModelRegistry::load(path)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((registry, dir))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

#[derive(Args)]
pub struct SynthesizeArgs {
    /// Output dataset root (defaults to $XFER_OUT/dataset).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Held-out samples per class.
    #[arg(long, default_value_t = 20)]
    eval_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Per-pixel Gaussian noise around the class texture.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
}

pub fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let out = super::resolve_out(args.out, "dataset")?;
    let spec = SyntheticSpec {
        num_classes: args.classes,
        samples_per_class: args.per_class,
        image_size: args.size,
        seed: args.seed,
        noise_std: args.noise,
    };
    let train = generate_synthetic(&spec, &out, Split::Train)?;
    let eval_spec = SyntheticSpec {
        samples_per_class: args.eval_per_class,
        ..spec
    };
    let eval = generate_synthetic(&eval_spec, &out, Split::Eval)?;
    println!(
        "wrote {} train and {} eval images ({} classes, {}x{}) under {}",
        train.len(),
        eval.len(),
        args.classes,
        args.size,
        args.size,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Architecture name: linear | toy_cnn | toy_vit.
    #[arg(long)]
    arch: String,
    /// Model id to register.
    #[arg(long)]
    id: String,
    /// Dataset root produced by `synthesize`.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint output directory (defaults to $XFER_OUT/models).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Registry file to create or update.
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
    /// Architecture hyperparameters as JSON (architecture defaults when omitted).
    #[arg(long)]
    params: Option<String>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Weight-init and shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let out = super::resolve_out(args.out, "models")?;
    let train = load_dataset(&args.dataset, Split::Train, ImagePolicy::AsIs)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let probe = train.image(0)?;
    let (channels, h, w) = probe.dim();
    let arch_params = match &args.params {
        Some(text) => serde_json::from_str(text).map_err(|e| Error::Config(format!("bad --params JSON: {e}")))?,
        None => serde_json::Value::Null,
    };
    let family = match args.arch.as_str() {
        "toy_vit" => Family::Vit,
        _ => Family::Cnn,
    };
    let spec = ModelSpec {
        model_id: args.id.clone(),
        arch: args.arch.clone(),
        family,
        num_classes: train.class_count(),
        input_size: (h, w),
        channels,
        mean: vec![0.5; channels],
        std: vec![0.25; channels],
        seed: args.seed,
        arch_params,
    };
    let model = ArchRegistry::builtin().build(&spec)?;
    let cfg = PretrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch,
        seed: args.seed,
    };
    let losses = xfer_core::trainer::pretrain(model.as_ref(), &train, &cfg)?;
    let train_acc = accuracy_on(model.as_ref(), &train)?;

    let ckpt_rel = PathBuf::from(format!("{}.ckpt", args.id));
    let ckpt_path = out.join(&ckpt_rel);
    let hash = checkpoint::save(model.as_ref(), &ckpt_path)?;

    let mut registry = ModelRegistry::load_or_empty(&args.registry)?;
    let reg_dir = args.registry.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rel = pathdiff(&ckpt_path, &reg_dir);
    registry.upsert(entry_for(model.as_ref(), rel, hash));
    registry.save(&args.registry)?;

    println!(
        "pretrained '{}' ({}): final loss {:.4}, train accuracy {:.1}%, checkpoint {}",
        args.id,
        args.arch,
        losses.last().copied().unwrap_or(f64::NAN),
        100.0 * train_acc,
        ckpt_path.display()
    );
    Ok(())
}

/// Relative path from `base` to `target`, falling back to the absolute
/// target when they do not share a prefix.
fn pathdiff(target: &Path, base: &Path) -> PathBuf {
    let target = target
        .canonicalize()
        .unwrap_or_else(|_| target.to_path_buf());
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    target.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(target)
}

#[derive(Args)]
pub struct AlignArgs {
    /// Surrogate model id in the registry.
    #[arg(long)]
    surrogate: String,
    /// Witness model id in the registry (frozen for the run).
    #[arg(long)]
    witness: String,
    /// Dataset root; the train split drives the alignment.
    #[arg(long)]
    dataset: PathBuf,
    /// Run-config TOML ([alignment], [self_adv], [trainer] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, manifest and diagnostics
    /// (defaults to $XFER_OUT/align).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
    /// Id for the aligned model (default: <surrogate>_aligned).
    #[arg(long)]
    aligned_id: Option<String>,
}

pub fn align(args: AlignArgs) -> Result<()> {
    let out = super::resolve_out(args.out, "align")?;
    let (mut registry, reg_dir) = load_registry(&args.registry)?;
    let surrogate = registry.load_model(&args.surrogate, &reg_dir)?;
    let witness = registry.load_model(&args.witness, &reg_dir)?;
    witness.freeze();

    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let train = load_dataset(&args.dataset, Split::Train, ImagePolicy::AsIs)?;
    let manifest = xfer_core::trainer::align(
        surrogate.as_ref(),
        witness.as_ref(),
        &train,
        &cfg.alignment_or_default(),
        &cfg.self_adv_or_default(),
        &cfg.trainer_or_default(),
        &out,
    )?;

    // register the aligned weights under a fresh id
    let aligned_id = args.aligned_id.unwrap_or_else(|| format!("{}_aligned", args.surrogate));
    let spec = ModelSpec {
        model_id: aligned_id.clone(),
        arch: surrogate.arch_name().to_string(),
        family: surrogate.family(),
        num_classes: surrogate.num_classes(),
        input_size: surrogate.input_size(),
        channels: surrogate.meta().channels,
        mean: surrogate.meta().mean.clone(),
        std: surrogate.meta().std.clone(),
        seed: 0,
        arch_params: surrogate.arch_params(),
    };
    let aligned = ArchRegistry::builtin().build(&spec)?;
    for ((_, dst), (_, src)) in aligned.named_params().iter().zip(surrogate.named_params()) {
        dst.set_data(src.value());
    }
    let ckpt_path = out.join(format!("{aligned_id}.ckpt"));
    let hash = checkpoint::save(aligned.as_ref(), &ckpt_path)?;
    registry.upsert(entry_for(aligned.as_ref(), pathdiff(&ckpt_path, &reg_dir), hash));
    registry.save(&args.registry)?;

    println!(
        "aligned '{}' to witness '{}' over {} samples; registered '{}'; manifest at {}",
        args.surrogate,
        args.witness,
        manifest.dataset_len,
        aligned_id,
        out.join("manifest.json").display()
    );
    Ok(())
}

#[derive(Args)]
pub struct AttackArgs {
    /// Comma-separated ensemble of model ids to craft against.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Dataset root supplying the images to perturb.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Attack preset name, e.g. mi, ni, di-ti-mi.
    #[arg(long, default_value = "mi")]
    preset: String,
    /// Attack spec TOML ([attack] section); overrides --preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Archive output directory (defaults to $XFER_OUT/attack).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on the number of images attacked.
    #[arg(long)]
    limit: Option<usize>,
    /// Also dump the adversarial images as PNGs.
    #[arg(long)]
    png: bool,
    /// Witness id recorded in the archive provenance.
    #[arg(long)]
    witness: Option<String>,
}

pub fn attack(args: AttackArgs) -> Result<()> {
    if args.models.is_empty() {
        return Err(Error::Config("--models needs at least one id".into()));
    }
    let out = super::resolve_out(args.out, "attack")?;
    let (registry, reg_dir) = load_registry(&args.registry)?;
    let mut models = Vec::new();
    for id in &args.models {
        let m = registry.load_model(id, &reg_dir)?;
        m.freeze();
        models.push(m);
    }
    let refs: Vec<&dyn ModelAdapter> = models.iter().map(|m| m.as_ref()).collect();

    let data = load_dataset(&args.dataset, parse_split(&args.split)?, ImagePolicy::AsIs)?;
    if data.is_empty() {
        return Err(Error::Config("dataset split is empty".into()));
    }
    let n = args.limit.unwrap_or(data.len()).min(data.len());
    let indices: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch(&indices)?;

    let (mut spec, attack_name) = match &args.spec {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.attack_or_default(), "custom".to_string())
        }
        None => (preset(&args.preset, models[0].input_size())?, args.preset.clone()),
    };
    spec.ensemble = args.models.clone();

    let batch = craft(&x, &y, &refs, &spec, args.seed)?;
    let provenance = AdvProvenance {
        surrogate_id: args.models[0].clone(),
        witness_id: args.witness.clone(),
        attack_name: attack_name.clone(),
    };
    archive::save_batch(&batch, &provenance, Some(&spec), args.seed, &out, args.png)?;
    println!(
        "crafted {} adversarial samples with '{}' (epsilon {:.4}) against [{}]; archive at {}",
        batch.len(),
        attack_name,
        spec.epsilon,
        args.models.join(", "),
        out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// One or more adversarial archive directories.
    #[arg(long, value_delimiter = ',')]
    adv: Vec<PathBuf>,
    /// Comma-separated target model ids.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Report CSV path (defaults to $XFER_OUT/report.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
    /// Keep the surrogate's own column in the average.
    #[arg(long)]
    include_surrogate: bool,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    if args.adv.is_empty() {
        return Err(Error::Config("--adv needs at least one archive directory".into()));
    }
    if args.targets.is_empty() {
        return Err(Error::Config("--targets needs at least one model id".into()));
    }
    let out = super::resolve_out(args.out, "report.csv")?;
    let (registry, reg_dir) = load_registry(&args.registry)?;
    let mut targets = Vec::new();
    for id in &args.targets {
        let m = registry.load_model(id, &reg_dir)?;
        m.freeze();
        targets.push(m);
    }
    let target_refs: Vec<&dyn ModelAdapter> = targets.iter().map(|m| m.as_ref()).collect();

    let mut loaded = Vec::new();
    for dir in &args.adv {
        loaded.push(archive::load_batch(dir)?);
    }
    let sets: Vec<(AdvProvenance, &xfer_core::selfadv::AdversarialBatch)> = loaded
        .iter()
        .map(|(batch, manifest)| (manifest.provenance.clone(), batch))
        .collect();

    let report = transfer_matrix(&sets, &target_refs, !args.include_surrogate)?;
    let csv = report.to_csv()?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, &csv)?;
    let manifest = serde_json::json!({
        "command": "evaluate",
        "adv": args.adv.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "archives": loaded.iter().map(|(_, m)| m.sha256.clone()).collect::<Vec<_>>(),
        "targets": args.targets,
        "exclude_surrogate": !args.include_surrogate,
        "registry": args.registry.display().to_string(),
    });
    std::fs::write(
        out.with_extension("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest encodes"),
    )?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Deserialize)]
struct PairRow {
    surrogate: String,
    witness: String,
    state: AlignState,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// JSON file: [{"surrogate": id, "witness": id, "state": "aligned"|"unaligned"}, ...].
    #[arg(long)]
    pairs: PathBuf,
    /// Dataset root supplying the evaluation sample.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Images drawn from the sample split.
    #[arg(long, default_value_t = 100)]
    limit: usize,
    /// Attack preset for the adversarial-input entries (omit for clean only).
    #[arg(long)]
    attack: Option<String>,
    /// Similarity CSV path (defaults to $XFER_OUT/sim.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    let out = super::resolve_out(args.out, "sim.csv")?;
    let (registry, reg_dir) = load_registry(&args.registry)?;
    let rows: Vec<PairRow> = serde_json::from_str(
        &std::fs::read_to_string(&args.pairs)
            .map_err(|e| Error::Config(format!("cannot read pairs file {}: {e}", args.pairs.display())))?,
    )
    .map_err(|e| Error::Config(format!("bad pairs file: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Config("pairs file is empty".into()));
    }

    let data = load_dataset(&args.sample, parse_split(&args.split)?, ImagePolicy::AsIs)?;
    let n = args.limit.min(data.len());
    if n == 0 {
        return Err(Error::Config("sample split is empty".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch(&indices)?;

    let mut models = Vec::new();
    for row in &rows {
        let s = registry.load_model(&row.surrogate, &reg_dir)?;
        s.freeze();
        let w = registry.load_model(&row.witness, &reg_dir)?;
        w.freeze();
        models.push((s, w, row.state));
    }
    let pairs: Vec<(&dyn ModelAdapter, &dyn ModelAdapter, AlignState)> =
        models.iter().map(|(s, w, st)| (s.as_ref(), w.as_ref(), *st)).collect();

    let spec = match &args.attack {
        Some(name) => Some(preset(name, models[0].0.input_size())?),
        None => None,
    };
    let report = cosine_similarity_report(&pairs, &x, &y, spec.as_ref(), args.seed)?;
    let csv = report.to_csv()?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, &csv)?;
    let manifest = serde_json::json!({
        "command": "analyze",
        "pairs": args.pairs.display().to_string(),
        "sample": args.sample.display().to_string(),
        "split": args.split,
        "limit": n,
        "attack": args.attack,
        "seed": args.seed,
        "registry": args.registry.display().to_string(),
    });
    std::fs::write(
        out.with_extension("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest encodes"),
    )?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct GradcamArgs {
    /// CNN-family model id.
    #[arg(long)]
    model: String,
    /// Dataset root to draw the image from.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Image index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Class to explain (defaults to the predicted class).
    #[arg(long)]
    class: Option<usize>,
    /// Output directory (defaults to $XFER_OUT/gradcam).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "registry.json")]
    registry: PathBuf,
}

pub fn gradcam(args: GradcamArgs) -> Result<()> {
    let out = super::resolve_out(args.out, "gradcam")?;
    let (registry, reg_dir) = load_registry(&args.registry)?;
    let model = registry.load_model(&args.model, &reg_dir)?;
    model.freeze();
    let data = load_dataset(&args.dataset, parse_split(&args.split)?, ImagePolicy::AsIs)?;
    if args.index >= data.len() {
        return Err(Error::Config(format!(
            "--index {} out of range for a split of {}",
            args.index,
            data.len()
        )));
    }
    let img = data.image(args.index)?;
    let map = compute_gradcam(model.as_ref(), &img, args.class)?;
    std::fs::create_dir_all(&out)?;
    let png = out.join(format!("heatmap_{}_{}.png", args.model, args.index));
    xfer_core::eval::gradcam::save_heatmap(&map, &png)?;
    let sidecar = serde_json::json!({
        "model": args.model,
        "dataset": args.dataset.display().to_string(),
        "split": args.split,
        "index": args.index,
        "label": data.label(args.index),
        "class": args.class,
        "heatmap": png.file_name().unwrap().to_string_lossy(),
    });
    std::fs::write(
        out.join(format!("heatmap_{}_{}.json", args.model, args.index)),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar encodes"),
    )?;
    println!("wrote {}", png.display());
    Ok(())
}
