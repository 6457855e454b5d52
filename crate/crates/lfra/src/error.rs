use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lfra_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("checkpoint format `{found}` is not supported (expected `{expected}`)")]
    VersionMismatch { found: String, expected: &'static str },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{failed} of {total} gradient checks exceeded their tolerance")]
    GradCheckFailed { failed: usize, total: usize },
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn image(path: impl AsRef<Path>) -> impl FnOnce(image::ImageError) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Image { path, source }
    }
}
