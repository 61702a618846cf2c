use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A NaN or infinity appeared while evaluating the named primitive or quantity.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("rank deficient system: {0}")]
    Rank(String),

    #[error("arity mismatch: {0}")]
    Arity(String),

    /// The requested operation is not available for this family, model or dataset.
    #[error("unsupported: {0}")]
    Capability(String),

    #[error("config error ({key}): {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
