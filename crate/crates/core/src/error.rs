use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },
    #[error("support violation: p has mass where q has none")]
    Support,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing checkpoint for prior stage: {0}")]
    MissingCheckpoint(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
