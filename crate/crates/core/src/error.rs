use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: axis {axis} expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training error on `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported format version {found} (this build reads {supported})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated or corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: payload holds {got} bytes, header implies {expected}")]
    PayloadLength {
        path: PathBuf,
        expected: u64,
        got: u64,
    },

    #[error("{path}: tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    TensorShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by unreadable or malformed input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Corrupt { .. }
                | Error::PayloadLength { .. }
                | Error::TensorShape { .. }
                | Error::Parse { .. }
                | Error::Manifest(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }

    /// True for failures of the numerics (divergence, NaN, failed checks).
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Training { .. } | Error::NonFinite(_))
    }
}
