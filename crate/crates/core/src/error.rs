use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid problem instance: {0}")]
    InvalidProblem(String),

    #[error("point has {got} coordinates, problem depth is {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("point is off the solution manifold: relative product deviation {deviation:.3e}")]
    OffManifold { deviation: f64 },

    #[error("coordinate {index} is {value}, expected a strictly positive value")]
    NonPositiveCoordinate { index: usize, value: f64 },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("unsupported derivative order {0}")]
    UnsupportedOrder(usize),

    #[error("projection bracket failure: {0}")]
    Bracket(String),

    #[error("singular normal-form denominator at eta*lambda = {eta_lambda}")]
    SingularDenominator { eta_lambda: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),
}
