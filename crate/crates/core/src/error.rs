use thiserror::Error;

/// Errors produced by the embedding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or operation parameter.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates an operation precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Dataset or label inconsistency.
    #[error("data error: {0}")]
    Data(String),

    /// Evaluation protocol cannot be carried out (e.g. empty score class).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Numerical failure (non-finite loss, zero-norm embedding, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (checkpoint, manifest, score CSV, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
