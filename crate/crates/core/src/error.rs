use thiserror::Error;

/// Errors produced by the dota library.
#[derive(Debug, Error)]
pub enum DotaError {
    /// Shapes, dimensions or index layouts do not agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// A numeric routine met non-finite data or failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller-supplied parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A serialized file or bundle is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// Experiment configuration is invalid; one entry per offending field.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DotaError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DotaError::Shape(msg.into()))
}
