use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("depth {depth} lies beyond the upper endpoint at double precision")]
    DepthBeyondEndpoint { depth: f64 },

    #[error("survival is zero at score {0}")]
    ZeroSurvival(f64),

    #[error("top-count {k} is not in 2..={m}")]
    InvalidTopCount { k: usize, m: usize },

    #[error("tied transformed scores at ranks {0} and {1}")]
    TiedScores(usize, usize),

    #[error("scores are not in descending order at rank {0}")]
    NotDescending(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no extrapolated ranks for fit size {m} and deploy size {n}")]
    EmptyRankSet { m: usize, n: usize },

    #[error("offset functional denominator A(t) is zero")]
    ZeroDenominator,

    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
