use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk artifact (checkpoint, image, report).
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("referential error: record `{id}` points at missing file {path}")]
    Referential { id: String, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
