//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed argument: dimension mismatch, non-finite data, out-of-range
    /// token, empty batch, and similar caller mistakes.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A quantizer spec that cannot be applied (bits out of range, group
    /// size not dividing the axis, wrong mode for the call).
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),

    /// An operation was called before its required preparation step.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Iterative numerics failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A Procrustes solve was requested on an accumulator with no samples.
    #[error("empty accumulator: {0}")]
    EmptyAccumulator(String),

    /// Underlying file-system failure.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    /// A container file that does not match the expected layout.
    #[error("malformed container: {0}")]
    Format(String),
}
