use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("solver failure after {iterations} iterations (residual {residual:e}): {message}")]
    SolverFailure {
        iterations: usize,
        residual: f64,
        message: String,
    },

    #[error("numeric divergence at round {round}: {message}")]
    Divergence { round: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("fingerprint mismatch: config {expected}, trace {found} ({path})")]
    FingerprintMismatch {
        expected: String,
        found: String,
        path: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
