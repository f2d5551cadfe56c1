use tailcast_autodiff::AdError;
use thiserror::Error;

pub type Result<T, E = GridError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no valid layout after {0} attempts")]
    RejectionExhausted(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("refusing to reuse artifact: {0}")]
    Mismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Forecast(#[from] tailcast::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
