//! `xfer`: synthesize datasets, pretrain toy classifiers, align a
//! surrogate to a frozen witness, craft transfer attacks, and measure
//! transferability and feature similarity.
//!
//! Exit codes: 0 success, 2 config/usage errors, 3 ingestion errors,
//! 4 runtime failures.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use xfer_core::FailureClass;

#[derive(Parser)]
#[command(name = "xfer", version, about = "Surrogate alignment and transfer-attack toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic dataset (train + eval splits).
    Synthesize(commands::SynthesizeArgs),
    /// Train a toy classifier on a dataset and register its checkpoint.
    Pretrain(commands::PretrainArgs),
    /// Fine-tune a surrogate against a frozen witness.
    Align(commands::AlignArgs),
    /// Craft adversarial examples with a composable gradient attack.
    Attack(commands::AttackArgs),
    /// Score adversarial archives against target models (ASR matrix).
    Evaluate(commands::EvaluateArgs),
    /// Feature cosine-similarity report over model pairs.
    Analyze(commands::AnalyzeArgs),
    /// Emit a class-activation heatmap for a CNN-family model.
    Gradcam(commands::GradcamArgs),
}

/// Resolve an output directory: explicit flag, else $XFER_OUT/<leaf>.
fn resolve_out(flag: Option<PathBuf>, leaf: &str) -> Result<PathBuf, xfer_core::Error> {
    match flag {
        Some(p) => Ok(p),
        None => match std::env::var_os("XFER_OUT") {
            Some(root) => Ok(PathBuf::from(root).join(leaf)),
            None => Err(xfer_core::Error::Config(format!(
                "--out not given and XFER_OUT is unset (needed for the {leaf} output directory)"
            ))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(args) => commands::synthesize(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Align(args) => commands::align(args),
        Command::Attack(args) => commands::attack(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Analyze(args) => commands::analyze(args),
        Command::Gradcam(args) => commands::gradcam(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                FailureClass::Config => ExitCode::from(2),
                FailureClass::Ingestion => ExitCode::from(3),
                FailureClass::Runtime => ExitCode::from(4),
            }
        }
    }
}
