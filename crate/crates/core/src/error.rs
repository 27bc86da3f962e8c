//! Crate-wide error taxonomy.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad resolution, unknown key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/shape mismatch between producer and consumer.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad argument (empty batch, count mismatch, out-of-range value).
    #[error("argument error: {0}")]
    Argument(String),

    /// Operation requires a checkpoint/provider that is not loaded.
    #[error("state error: {0}")]
    State(String),

    /// Non-finite value or numerically invalid input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged or failed at a specific step.
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },

    /// Malformed on-disk artifact (bad magic, truncation, version).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn training(step: u64, msg: impl Into<String>) -> Self {
        Error::Training {
            step,
            msg: msg.into(),
        }
    }
}
