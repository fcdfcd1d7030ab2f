use std::path::PathBuf;

/// Errors raised anywhere in the detector stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path}:{line}:{column}: {msg}")]
    Parse {
        path: PathBuf,
        line: u32,
        column: u32,
        msg: String,
    },
    #[error("record error in {path}: {msg}")]
    Record { path: PathBuf, msg: String },
    #[error("load error: {0}")]
    Load(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("parameter `{path}`: expected shape {expected:?}, checkpoint has {found:?}")]
    ParamMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
