//! Error type shared across the library.

/// Errors produced by library operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An operation that requires at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(String),
    /// The value is missing state the operation needs (e.g. normalization
    /// parameters on an image that was never encoded).
    #[error("invalid state: {0}")]
    State(String),
    /// A file did not match its format; `offset` is the byte position at
    /// which the reader gave up.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// A value cannot be represented in the target encoding.
    #[error("value out of range: {0}")]
    Range(String),
    /// A checkpoint was written by an incompatible version.
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    /// A computation produced a non-finite value.
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
