use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown view id {0}")]
    UnknownView(usize),
    #[error("non-finite gradient in {group} at iteration {iter}")]
    NonFinite { group: &'static str, iter: usize },
    #[error("training diverged at iteration {iter}: loss {loss} exceeded 10x initial loss {initial} for 100 iterations")]
    Diverged { iter: usize, loss: f64, initial: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding error: {0}")]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
