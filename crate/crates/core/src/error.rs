use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QbmError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Pooling or softmax over a fully masked input.
    #[error("empty pool: {0}")]
    EmptyPool(String),

    /// An input with no valid tokens, or a bag with no questions.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("instance format error: {0}")]
    InstanceFormat(String),

    #[error("parameter error: {0}")]
    Parameter(String),
}

impl QbmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        QbmError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures of the numeric kind (as opposed to usage, config or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(self, QbmError::NonFiniteLoss { .. })
    }
}
