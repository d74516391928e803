//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary or text payload. `offset` is the byte offset at which
    /// the problem was detected.
    #[error("format error{} at offset {offset}: {reason}", path_suffix(.path))]
    Format {
        path: Option<PathBuf>,
        offset: u64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Failure while building a store, tagged with the image/scale that caused it.
    #[error("build failed for image `{image_id}` scale `{scale_id}`: {source}")]
    Build {
        image_id: String,
        scale_id: String,
        #[source]
        source: Box<Error>,
    },

    /// Invariant violation that indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: Option<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path,
            offset,
            reason: reason.into(),
        }
    }

    pub fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidArgument(reason.into())
    }

    pub fn build(image_id: impl Into<String>, scale_id: impl Into<String>, source: Error) -> Self {
        Error::Build {
            image_id: image_id.into(),
            scale_id: scale_id.into(),
            source: Box::new(source),
        }
    }
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}
