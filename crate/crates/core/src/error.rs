use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the mass-estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at parameter index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },

    #[error("unknown material: {0}")]
    UnknownMaterial(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{0}")]
    Usage(String),

    #[error("missing input: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch}, sample {sample}: loss {loss}")]
    Diverged { epoch: usize, sample: String, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
