use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition (shape, range, degenerate spec).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// Caller broke an API contract (unnormalized rows, missing cache, shape mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical range error: {0}")]
    Numerical(String),

    /// Malformed or truncated binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("clip {clip}: {source}")]
    Clip {
        clip: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    /// Attach a clip id to an error raised while processing that clip.
    pub fn in_clip(self, clip: impl Into<String>) -> Self {
        Error::Clip {
            clip: clip.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping clip-context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Clip { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
