use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("empty reduction in {0}: every position is masked")]
    EmptyReduction(&'static str),

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown emotion class `{0}`")]
    UnknownClass(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("missing negative sample for batch element {0}")]
    MissingNegative(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
