use thiserror::Error;

pub type Result<T, E = AdError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("bad parameter file: {0}")]
    Format(String),
}

impl From<std::io::Error> for AdError {
    fn from(e: std::io::Error) -> Self {
        AdError::Io(e.to_string())
    }
}
