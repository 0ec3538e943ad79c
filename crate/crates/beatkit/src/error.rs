//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by any beatkit component.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A softmax slice contained only masked (-inf) entries.
    #[error("degenerate slice: {0}")]
    DegenerateSlice(String),

    /// An API contract was violated (wrong argument kind, missing state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Annotation data is malformed or out of range.
    #[error("annotation error: {0}")]
    Annotation(String),

    /// A public operation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged (NaN loss).
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A file did not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for data problems, 3 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
