use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RaftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RaftError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("series too short: need at least {needed} steps, have {available}")]
    SeriesTooShort { needed: usize, available: usize },

    #[error("period {period} exceeds window width {width}")]
    PeriodTooLarge { period: usize, width: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Divergence { epoch: usize, step: usize },

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("need at least {needed} records, got {found}")]
    InsufficientRecords { needed: usize, found: usize },
}

impl RaftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RaftError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        RaftError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        RaftError::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }
}
