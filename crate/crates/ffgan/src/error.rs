use std::path::PathBuf;

/// Errors raised by the data, training and evaluation drivers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ffgan_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),
    /// Training hit a non-finite loss; the state before the failing step was
    /// written to `dump`.
    #[error("non-finite loss at step {step}: {message} (state dumped to {dump})")]
    NonFinite { step: u64, message: String, dump: PathBuf },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
