use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("norm {norm:e} is too close to zero{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    NearZeroNorm { row: Option<usize>, norm: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{0} needs a nonempty input")]
    EmptyInput(&'static str),

    #[error("marginal entry {index} is {value}; marginals must be strictly positive")]
    NonPositiveMarginal { index: usize, value: f64 },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("transport plan carries no forward tape to differentiate")]
    NoForwardTape,

    #[error("batch of {0} pairs is too small; at least 2 are needed")]
    BatchTooSmall(usize),

    #[error("similarity graph covers {graph} samples but the batch has {batch}")]
    GraphBatchMismatch { graph: usize, batch: usize },

    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),

    #[error("invalid k = {k}; must lie in 1..={max}")]
    BadK { k: usize, max: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("split {0} is empty")]
    EmptySplit(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
