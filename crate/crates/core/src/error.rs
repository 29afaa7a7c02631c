use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("bad magic bytes {found:02x?}, expected \"PMFT\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("unknown dtype code {0:#04x}")]
    BadDtype(u8),

    #[error("file truncated while reading {field}")]
    Truncated { field: &'static str },

    #[error("dimension {index} is zero; all dimensions must be positive")]
    ZeroDim { index: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing modality `{0}`")]
    MissingModality(String),

    #[error("invalid sample field `{field}`: {msg}")]
    Sample { field: String, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss in {context}")]
    NonFiniteLoss { context: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn sample(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Sample {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
