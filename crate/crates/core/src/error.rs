use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum FrappeError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FrappeError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FrappeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FrappeError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::FrappeError::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::FrappeError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
