use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown news id `{0}`")]
    UnknownNews(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
