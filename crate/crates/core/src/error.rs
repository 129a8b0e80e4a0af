//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates a precondition (non-finite values, index out of range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset directory, manifest, or tensor file is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training failure: non-finite loss at epoch {epoch}, iteration {iteration}")]
    TrainingFailure { epoch: usize, iteration: usize },

    /// Batch sampling could not satisfy its constraints.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A checkpoint file failed to parse.
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: u64, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
