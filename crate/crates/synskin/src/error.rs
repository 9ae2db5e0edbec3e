use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynSkinError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("mask directory {0} contains no mask images")]
    EmptyMaskDir(PathBuf),
    #[error("no usable lesion blob after {0} attempts")]
    DegenerateBlob(usize),
    #[error("unknown color {0:?}")]
    UnknownColor(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed dataset file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, SynSkinError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SynSkinError {
    let path = path.into();
    move |source| SynSkinError::Io { path, source }
}
