//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's contract (bad value, empty set, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The separation penalty gradient is undefined when both parameter
    /// vectors are identical; callers skip the penalty term for that step.
    #[error("separation penalty gradient undefined: parameter vectors are identical")]
    DegeneratePenalty,

    /// A configuration file failed validation; names the offending field.
    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A wire frame or message violated the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A peer spoke an unsupported protocol version.
    #[error("unsupported protocol version {got} (expected {want})")]
    Version { got: u32, want: u32 },

    /// A communication round received no usable uploads.
    #[error("round {round} aborted: no uploads received")]
    RoundAborted { round: usize },

    /// A CSV file is missing a column the schema requires.
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    /// A non-finite value was about to be serialized.
    #[error("encoding error: non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
