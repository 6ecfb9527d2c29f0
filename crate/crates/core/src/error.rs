use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SfdaError>;

/// Failure while decoding a tensor or model file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("dimension overflow: shape {0:?} does not fit in memory")]
    DimOverflow(Vec<u64>),
    #[error("trailing data: {0} unread bytes")]
    TrailingBytes(usize),
    #[error("structure mismatch: {0}")]
    Structure(String),
}

#[derive(Debug, Error)]
pub enum SfdaError {
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("config error at line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SfdaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SfdaError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfdaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the user can fix by editing flags or config files.
    pub fn is_config_error(&self) -> bool {
        matches!(self, SfdaError::ConfigLine { .. } | SfdaError::Config(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::SfdaError::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
