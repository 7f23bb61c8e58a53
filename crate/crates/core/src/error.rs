use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid icon: {0}")]
    InvalidIcon(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("image {index} has dimensions {got:?}, expected {expected:?}")]
    ImageShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
