use thiserror::Error;

/// Crate-wide error type.  `Invalid`/`Dimension` cover malformed inputs and
/// configuration; `Numerical`, `Assumption` and `NonConvergence` cover failures
/// that arise while computing on well-formed inputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user-supplied inputs rather than computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Dimension(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Serialization(_)
        )
    }
}
