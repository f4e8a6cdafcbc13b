//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by state validation, integration, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A state invariant (Hermiticity, trace, positivity, ordering) failed.
    #[error("state invariant violated: {0}")]
    InvalidState(String),

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A field was queried at a registered non-smooth point.
    #[error("non-smooth query: {0}")]
    NonSmoothQuery(String),

    /// An explicit scheme was asked to run outside its stability bound.
    #[error("scheme stability violated: {0}")]
    Unstable(String),

    /// An iterative solver exhausted its budget without converging.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// Export or other I/O failed.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
