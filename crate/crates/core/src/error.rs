use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, channel counts or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An object was used in a state that no longer supports the request.
    #[error("state error: {0}")]
    State(String),

    /// A resource limit (tape size, memory) was exceeded.
    #[error("resource error: {0}")]
    Resource(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
            Error::State(_) | Error::Resource(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
