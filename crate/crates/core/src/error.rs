use thiserror::Error;

/// Errors produced by the sampling engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("no mixture component matches the requested layout")]
    NoMatchingLayout,

    #[error("reference trajectory has no latent for timestep {0}")]
    ReferenceGap(usize),

    #[error("correlation undefined: input has zero variance")]
    UndefinedCorrelation,

    #[error("malformed document at {path}: {message}")]
    Malformed { path: String, message: String },

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invariant violation at {path}: {message}")]
    Invariant { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
