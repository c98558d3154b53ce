use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A composition or service request that names something unknown or
    /// leaves a required slot empty.
    #[error("invalid request field `{field}`: {message}")]
    Request { field: String, message: String },

    /// A code vector that parses but cannot be a style code (wrong layer
    /// lengths, non-finite entries).
    #[error("malformed code in `{field}`: {message}")]
    MalformedCode { field: String, message: String },

    #[error("checkpoint error in `{name}`: {reason}")]
    Checkpoint { name: String, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Request {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn checkpoint(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
