use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside admissible domain {domain}")]
    TimeDomain { t: f64, domain: &'static str },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite input to score network")]
    NonFiniteInput,

    #[error("unknown feature tap layer {0}")]
    UnknownTap(usize),

    #[error("numerical divergence at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("training loss became non-finite at step {step}")]
    LossDivergence { step: usize },

    #[error("grid underrun: start index {start} with {steps} steps leaves the time grid")]
    GridUnderrun { start: usize, steps: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unsupported dtype code {0}")]
    BadDtype(u8),

    #[error("truncated file {0}")]
    Truncated(PathBuf),

    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
