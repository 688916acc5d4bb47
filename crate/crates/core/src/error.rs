use std::path::PathBuf;

use crate::raster::Region;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid split at offset {loc} of an extent of {extent} pixels")]
    InvalidSplit { extent: usize, loc: usize },
    #[error("region {region:?} lies outside a {width}x{height} grid")]
    OutOfBounds {
        region: Region,
        width: usize,
        height: usize,
    },
    #[error("empty region")]
    EmptyRegion,
    #[error("node {0} is not pending")]
    NotPending(usize),
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("parse tree is incomplete: node {0} is still pending")]
    IncompleteTree(usize),
    #[error("no legal production rule")]
    EmptyRuleMask,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("replay memory is empty")]
    EmptyMemory,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot process image {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem or file contents rather than
    /// by arguments or numerics.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } | Error::Json(_)
        ) || matches!(self, Error::Dataset(_))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
