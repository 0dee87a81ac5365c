use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("convex combination is singular (min eigenvalue {min_eig:e})")]
    SingularCombination { min_eig: f64 },

    #[error("atom set has no positive definite atom")]
    InfeasibleAtoms,

    #[error("invalid atom set: {0}")]
    InvalidAtoms(String),

    #[error("simplex grid would need {points} evaluations (limit 1e8)")]
    GridTooLarge { points: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {node}: lambda_max(Q) = {lambda_max:e} exceeds bound {bound:e}")]
    BoundednessViolation {
        node: usize,
        lambda_max: f64,
        bound: f64,
    },

    #[error("graph is not connected")]
    Disconnected,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("round {k} is outside the input sequence of length {len}")]
    IndexOutOfRange { k: usize, len: usize },

    #[error("innovation covariance is singular")]
    SingularInnovation,
}
