use thiserror::Error;

/// Errors raised across the model, data and runtime layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("position mismatch: cache holds {cache_len} positions but step requested position {requested}")]
    Position { cache_len: usize, requested: usize },

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("mode/checkpoint mismatch: {0}")]
    ModeMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
