//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an out-of-range or inconsistent argument.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A scenario or preset file failed validation. Carries the offending
    /// file position and key so the CLI can point at it.
    #[error("{file}:{line}: {message}")]
    Config {
        file: String,
        line: usize,
        message: String,
    },

    /// An iterative fit did not converge within its iteration budget.
    /// The last iterate is reported for diagnostics.
    #[error("fit failed after {iterations} iterations: {message} (last iterate {last:?}, objective {objective})")]
    FitFailure {
        message: String,
        iterations: usize,
        last: Vec<f64>,
        objective: f64,
    },

    /// The IV curve never crossed the breakdown threshold current.
    #[error("no breakdown found: {0}")]
    NoBreakdown(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// CLI exit code convention: 1 for configuration problems, 2 for
    /// runtime and fit failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => 1,
            _ => 2,
        }
    }
}
