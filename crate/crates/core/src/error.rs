//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed runtime input (shape mismatch, out-of-range index, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Rejected configuration (bad key, inconsistent dimensions, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Non-finite values or other numeric failure; carries context such as
    /// the block or step where the value first went bad.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint load/save problems (missing tensor, wrong byte count, ...).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config errors, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
