//! CLI and HTTP/JSON front end for genprim.

pub mod cli;
pub mod jobs;
pub mod pipeline;
pub mod scene_file;
pub mod server;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] genprim::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}
