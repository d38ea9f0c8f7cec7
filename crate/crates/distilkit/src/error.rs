//! Crate-wide error type.
//!
//! Every variant carries a stable machine-parsable code (see [`Error::code`])
//! that the CLI prints as `error: <code>: <message>` on the diagnostic stream.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("gradient root must be a scalar, got {0} elements")]
    NonScalarRoot(usize),

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("degenerate target: non-target mass below the probability floor")]
    DegenerateTarget,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("unsupported or malformed wav data: {0}")]
    WavFormat(String),

    #[error("sample rate mismatch: file has {found} Hz, expected {expected} Hz")]
    SampleRate { found: u32, expected: u32 },

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(u64),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code for scripting against CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::EmptyInput(_) => "empty-input",
            Error::BadTemperature(_) => "bad-temperature",
            Error::NonFinite(_) => "non-finite",
            Error::NonScalarRoot(_) => "non-scalar-root",
            Error::TargetOutOfRange { .. } => "target-out-of-range",
            Error::DegenerateTarget => "degenerate-target",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::BadConfig(_) => "bad-config",
            Error::InputTooShort(_) => "input-too-short",
            Error::WavFormat(_) => "wav-format",
            Error::SampleRate { .. } => "sample-rate",
            Error::CacheMismatch(_) => "cache-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged(_) => "diverged",
            Error::Precondition(_) => "precondition",
            Error::Verification(_) => "verification",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
