use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SivtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SivtError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value in {stage}")]
    NonFinite { stage: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dataset index error: {0}")]
    Index(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SivtError {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            SivtError::Shape(_) => "shape",
            SivtError::Parameter(_) => "parameter",
            SivtError::Config(_) => "config",
            SivtError::Invariant(_) => "invariant",
            SivtError::NonFinite { .. } => "non_finite",
            SivtError::UndefinedMetric(_) => "undefined_metric",
            SivtError::Decode { .. } => "decode",
            SivtError::Index(_) => "index",
            SivtError::Checkpoint(_) => "checkpoint",
            SivtError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SivtError::Io {
            path: path.into(),
            source,
        }
    }
}
