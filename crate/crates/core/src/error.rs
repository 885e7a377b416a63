use thiserror::Error;

pub type Result<T> = std::result::Result<T, ZipError>;

#[derive(Debug, Error)]
pub enum ZipError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{0}: every row is ignored, nothing to classify")]
    EmptyBatch(&'static str),

    #[error("batchnorm2d: eval mode requested but running statistics are uninitialized")]
    UninitializedStats,

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("{what}: parse error at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("unsupported {what} version {version}")]
    UnknownVersion { what: &'static str, version: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ZipError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        ZipError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        ZipError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        ZipError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
