//! Error taxonomy shared by every subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural misuse: incompatible shapes, bad model dims, unknown config fields.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad runtime input: out-of-range index, non-binary mask, empty batch.
    #[error("validation error: {0}")]
    Validation(String),

    /// API called out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Federation contract broken: missing client message, round mismatch.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite values during training; carries round/client/batch context.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Corrupt or mismatched checkpoint / dataset container.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
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
