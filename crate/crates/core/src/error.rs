use thiserror::Error;

/// Errors raised across the model, training, and file-format layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix shape mismatch: {0}")]
    Shape(String),

    #[error("function returned a non-finite value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("invalid spline domain [{lo}, {hi}]")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("at least {needed} individuals are required, got {got}")]
    TooFewIndividuals { needed: usize, got: usize },

    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    DivergenceDetected { epoch: usize },

    #[error("dataset carries no ground-truth random effects")]
    MissingGroundTruth,

    #[error("split `{0}` has no individuals")]
    EmptySplit(&'static str),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
