use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op} along {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("batch normalization in eval mode before any running statistics exist")]
    MissingRunningStats,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("non-contiguous labels: expected 0..{expected}, found {found:?}")]
    NonContiguousLabels { expected: usize, found: Vec<usize> },

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("unreadable frame {}: {reason}", path.display())]
    UnreadableFrame { path: PathBuf, reason: String },

    #[error("range {start}..{end} out of bounds for {len} frames")]
    RangeOutOfBounds { start: usize, end: usize, len: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config hash mismatch: file has {found}, model has {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing prediction for video {0}")]
    MissingPrediction(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (videos: {videos:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        videos: Vec<String>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used by the command-line tool for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::HashMismatch { .. } | Error::InvalidArgument(_) => {
                ErrorClass::Config
            }
            Error::NonFiniteLoss { .. } | Error::UndefinedCorrelation(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
