use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("model contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),

    #[error("bad patch file {path}: {reason}")]
    PatchFormat { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}, batch {batch}, iteration {iteration}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        iteration: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
