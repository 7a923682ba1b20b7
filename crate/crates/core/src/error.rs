use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image header: {0}")]
    CorruptHeader(String),

    #[error("truncated image data: {0}")]
    Truncated(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid record: {0}")]
    Record(String),

    #[error("images do not overlap under the requested transform")]
    NoOverlap,

    #[error("registration failed for frame {frame}: {source}")]
    Registration {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("solver diverged: non-finite values after the {update} update at iteration {iteration}")]
    Divergence { update: &'static str, iteration: usize },

    #[error("eigendecomposition of the Gram matrix failed")]
    Eigen,

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parameter { .. } => "parameter",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::CorruptHeader(_) => "corrupt-header",
            Error::Truncated(_) => "truncated",
            Error::Io { .. } => "io",
            Error::Manifest(_) => "manifest",
            Error::Record(_) => "record",
            Error::NoOverlap => "no-overlap",
            Error::Registration { .. } => "registration",
            Error::Divergence { .. } => "divergence",
            Error::Eigen => "eigen",
            Error::Empty(_) => "empty",
        }
    }
}
