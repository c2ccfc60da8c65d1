use std::fmt;

/// Errors produced by the tensor engine, the model and the harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    InvalidArgument(String),
    /// An operation produced a NaN or infinite value. `op` names the
    /// offending operation; `context` optionally names the tensor.
    NonFinite { op: String, context: Option<String> },
    /// A byte stream (PGM image, checkpoint) could not be decoded.
    Parse { offset: usize, message: String },
    /// Underlying I/O failure.
    Io(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            context: None,
        }
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// Attach a tensor/step name to a `NonFinite` error; other variants are
    /// returned unchanged.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::NonFinite { op, .. } => Error::NonFinite {
                op,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { op, context: None } => {
                write!(f, "non-finite value produced by `{op}`")
            }
            Error::NonFinite {
                op,
                context: Some(ctx),
            } => write!(f, "non-finite value produced by `{op}` in {ctx}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
