use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model, data and evaluation pipeline.
#[derive(Debug, Error)]
pub enum CatrError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("resource error: {0}")]
    Resource(String),
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CatrError>;

impl CatrError {
    pub(crate) fn shapes(op: &str, a: &[usize], b: &[usize]) -> Self {
        CatrError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatrError::Io { path: path.into(), source }
    }
}
