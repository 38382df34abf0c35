use thiserror::Error;

pub type Result<T, E = QfedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QfedError {
    /// Inconsistent sizes or settings supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// Internal contract broken (index out of range, shape mismatch).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Bad dataset contents (empty set, label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed IDX input.
    #[error("parse error in {file} at byte {offset}: expected {expected}, found {found}")]
    Parse {
        file: String,
        offset: usize,
        expected: String,
        found: String,
    },

    /// The finite-difference oracle hit a non-finite function value.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Usage errors from the command line / config file.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl QfedError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        QfedError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::QfedError::Config(format!($($arg)*)) };
}

macro_rules! invariant_err {
    ($($arg:tt)*) => { $crate::error::QfedError::Invariant(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use invariant_err;
