use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation
    /// (zero where nonzero is required, radius beyond `r_max`, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Requested a combination the crate does not implement
    /// (for example coset enumeration with n != 2).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A configured resource guard was exceeded (level cap, entry-bound
    /// cap, time budget).
    #[error("resource guard exceeded: {0}")]
    Resource(String),

    /// Input is structurally valid but carries no information
    /// (fit over an empty or constant grid).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An internal invariant failed; indicates a bug, never user error.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 2 usage/domain, 3 resource, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Unsupported(_) | Error::Degenerate(_) => 2,
            Error::Resource(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}
