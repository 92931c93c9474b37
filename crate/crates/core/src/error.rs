use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape has already been consumed")]
    TapeConsumed,

    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("channel {channel} has zero standard deviation")]
    ZeroStd { channel: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: expected {expected} bytes, found {found}")]
    FileSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: record {record} has label byte {label}")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("weight file: {0}")]
    Format(String),

    #[error("empty metrics")]
    EmptyMetrics,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors that originate from data files or weight files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::FileSize { .. }
                | Error::BadLabel { .. }
                | Error::Format(_)
                | Error::ZeroStd { .. }
        )
    }
}
