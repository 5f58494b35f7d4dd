use motok_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated {what}: expected {expected} bytes, got {actual}")]
    Truncated {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vocabulary error at index {index}: {message}")]
    Vocab { index: usize, message: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("not fitted: {0}")]
    NotFitted(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing checkpoint {path}: run `{hint}` first")]
    MissingCheckpoint { path: String, hint: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
