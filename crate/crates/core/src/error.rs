use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (missing columns, bad header, unknown format).
    #[error("format error: {0}")]
    Format(String),

    /// A specific data row failed to parse.
    #[error("row error at line {line}: {message}")]
    Row { line: usize, message: String },

    /// Data does not match the declared feature schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Lookup of an id, feature, or table entry failed.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    /// An environment is too small for the requested operation.
    #[error("degenerate environment {env}: {message}")]
    DegenerateEnv { env: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
