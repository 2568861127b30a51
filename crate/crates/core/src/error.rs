use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt record {index}: label byte {label}")]
    CorruptRecord { index: usize, label: u8 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: &'static str },

    #[error("attack failed on sample {sample_id}: {reason}")]
    AttackFailure { sample_id: u64, reason: String },

    #[error("degenerate geometry: logit gradient difference norm {0:e} below 1e-12")]
    DegenerateGeometry(f64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated blob: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
