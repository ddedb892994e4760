use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid DAG: {0}")]
    InvalidDag(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("empty target sequence")]
    EmptyTarget,

    #[error("infeasible alignment: target length {target} cannot be placed on {vertices} vertices")]
    InfeasibleAlignment { target: usize, vertices: usize },

    #[error("fragment {index} is infeasible: {reason}")]
    InfeasibleFragment { index: usize, reason: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("enumeration refused: {count} paths exceeds the limit of {limit}")]
    TooManyPaths { count: u128, limit: u128 },

    #[error("passage too short: {actual} tokens, at least {required} required")]
    PassageTooShort { actual: usize, required: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("sequence of length {len} exceeds the model limit of {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("non-finite loss in batch {batch}: loss={loss}, max |grad|={max_grad}")]
    NonFiniteLoss { batch: usize, loss: f64, max_grad: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pipeline worker failed: {0}")]
    Worker(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
