use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("sampler aborted: {0}")]
    SamplerAborted(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
