//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by the library.
///
/// The CLI maps these onto its exit-code contract: configuration and
/// input problems → 1, non-regular models and boundary failures → 2,
/// insufficient data → 3.
#[derive(Debug, Error)]
pub enum Error {
    /// The experiment configuration could not be parsed or is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation received arguments outside its contract.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The model violates a regularity requirement (boundary weights,
    /// coincident means, or a Fisher matrix that is not positive definite
    /// within the conditioning threshold).
    #[error("model not regular: {0}")]
    NonRegular(String),

    /// An estimator collapsed onto the parameter-space boundary.
    #[error("boundary failure: {0}")]
    Boundary(String),

    /// Not enough data (or grid points) for the requested computation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Filesystem problem while reading or writing experiment artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
