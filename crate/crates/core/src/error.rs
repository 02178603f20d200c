//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("cannot encode an empty token sequence")]
    EmptySequence,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("joint sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("unknown parameter(s) in checkpoint: {}", .0.join(", "))]
    UnknownParameters(Vec<String>),

    #[error("missing parameter(s) in checkpoint: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("duplicate document id {0}")]
    DuplicateId(u64),

    #[error("document {id}: {source}")]
    Document {
        id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown document id {0}")]
    UnknownDoc(u64),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config conflict for `{key}`: {first} vs {second}")]
    ConfigConflict {
        key: String,
        first: String,
        second: String,
    },

    #[error("{}: {source}", .path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
