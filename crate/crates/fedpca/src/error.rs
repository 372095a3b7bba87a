//! Error type shared across the library.
//!
//! Contract violations (shape mismatches, out-of-range arguments, invalid
//! configuration) are reported as typed errors rather than panics so that a
//! failing experiment cell can be isolated without aborting a whole matrix.

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Experiment or scenario configuration is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// Not enough samples to carry out the requested computation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// No client contributed any trainable data this round.
    #[error("no trainable data: {0}")]
    NoTrainableData(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Underlying I/O failure while writing or reading artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Configuration file could not be parsed.
    #[error("config parse error: {0}")]
    Parse(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
