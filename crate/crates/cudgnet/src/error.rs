//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: content has {content} elements, style has {style}")]
    LengthMismatch { content: usize, style: usize },

    #[error("non-finite input in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown corruption '{name}'; valid names: {valid}")]
    UnknownCorruption { name: String, valid: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("output already exists: {0} (pass --force to overwrite)")]
    OutputExists(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
