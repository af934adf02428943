use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// The CLI maps these onto process exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("reference solver did not converge: {0}")]
    ReferenceNotConverged(String),

    #[error("permutation schedule exhausted at epoch {epoch}")]
    ScheduleExhausted { epoch: usize },

    #[error("out-of-order call: expected epoch {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("numerical abort at epoch {epoch}: {reason}")]
    NumericalAbort { epoch: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 bad input, 2 numerical abort, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } => 2,
            Error::Verification(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
