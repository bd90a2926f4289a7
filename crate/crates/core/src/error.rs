use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QsrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty mask: masked average pooling needs at least one foreground pixel")]
    EmptyMask,
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("episode sampling failed: {0}")]
    Sampling(String),
    #[error("training diverged at step {step}: non-finite {term}")]
    Diverged { step: usize, term: String },
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = QsrError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> QsrError {
    QsrError::InvalidInput(msg.into())
}
