//! Crate-wide error type.

/// Errors produced by any part of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that were required to agree did not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// User-supplied data was rejected.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric operation received non-finite values.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Checkpoint import failed.
    #[error("import error: {0}")]
    Import(String),

    /// A document id was not present in a cache or corpus.
    #[error("not found: {0}")]
    NotFound(String),

    /// A text or binary file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Binary container was malformed.
    #[error("malformed {container}: {msg}")]
    Malformed { container: &'static str, msg: String },

    /// A cache was built by a different model than the one loading it.
    #[error("model fingerprint mismatch: cache was built by a different model")]
    FingerprintMismatch,

    /// A configuration value was rejected.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
