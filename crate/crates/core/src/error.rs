use std::path::PathBuf;

use thiserror::Error;

use crate::raster::PatchRect;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported raster format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("zero-sized raster")]
    EmptyRaster,
    #[error("invalid raster data: {0}")]
    InvalidRaster(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rectangle {rect:?} does not fit inside a {width}x{height} raster")]
    OutOfBounds {
        rect: PatchRect,
        width: usize,
        height: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor shape mismatch: {0}")]
    Shape(String),
    #[error("backward failed: {0}")]
    Graph(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Divergence { epoch: usize, step: usize },
    #[error("AUC is undefined when the ground truth contains a single class")]
    SingleClass,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
