use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),

    #[error("prompt {0:?} has no [v] placeholder")]
    MissingPlaceholder(String),

    #[error("prompt {0:?} must not contain a [v] placeholder")]
    UnexpectedPlaceholder(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("base model mismatch: concept trained on {expected}, got {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
