use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions, or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API called out of order or on the wrong kind of object.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity appeared in a value that must stay finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An internal invariant was broken (for example a negative convex weight).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// A file did not match its binary or JSON format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
