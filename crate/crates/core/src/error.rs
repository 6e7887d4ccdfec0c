//! Error type shared across the toolkit. Variants are grouped into three
//! failure classes (config, ingestion, runtime) that the CLI maps onto
//! distinct exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Input batch violates an adapter's shape/range contract.
    InputContract(String),
    /// Operation not defined for the model family.
    UnsupportedArchitecture(String),
    /// Token count cannot be arranged into the configured spatial grid.
    GridInference(String),
    /// Models or datasets disagree on the class space.
    ClassSpace(String),
    /// Local logit grids disagree spatially; pool before aligning.
    SpatialAlignment(String),
    /// Adversarial generation produced a non-finite gradient.
    Generation { batch_index: usize, message: String },
    /// Training loss became non-finite; parameters were rolled back.
    Diverged(String),
    /// Bad configuration value, file or flag.
    Config(String),
    /// Dataset ingestion failure; `row` names the offending manifest row.
    Ingestion { row: Option<usize>, message: String },
    /// Checkpoint content hash mismatch or malformed checkpoint.
    Integrity(String),
    /// Report assembly failure (missing columns, schema violations).
    Report(String),
    Io(std::io::Error),
}

/// Coarse failure class, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Ingestion,
    Runtime,
}

impl Error {
    pub fn class(&self) -> FailureClass {
        match self {
            Error::Config(_) => FailureClass::Config,
            Error::Ingestion { .. } | Error::Io(_) => FailureClass::Ingestion,
            _ => FailureClass::Runtime,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InputContract(m) => write!(f, "input contract violation: {m}"),
            Error::UnsupportedArchitecture(m) => write!(f, "unsupported architecture: {m}"),
            Error::GridInference(m) => write!(f, "grid inference failed: {m}"),
            Error::ClassSpace(m) => write!(f, "class-space mismatch: {m}"),
            Error::SpatialAlignment(m) => write!(f, "spatial alignment mismatch: {m}"),
            Error::Generation { batch_index, message } => {
                write!(f, "adversarial generation failed at batch index {batch_index}: {message}")
            }
            Error::Diverged(m) => write!(f, "training diverged: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Ingestion { row: Some(r), message } => write!(f, "ingestion error at row {r}: {message}"),
            Error::Ingestion { row: None, message } => write!(f, "ingestion error: {message}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Report(m) => write!(f, "report error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
