use thiserror::Error;

/// Errors raised by tensor operations, model assembly, data generation and IO.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("invalid argument for {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error(
        "channel mismatch at level {level}: params expect {expected}, feature map has {actual}"
    )]
    ChannelMismatch { level: usize, expected: usize, actual: usize },

    #[error("gradient missing for parameter {index}; run backward before the update")]
    MissingGradient { index: usize },

    #[error("loss must be scalar, got shape {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("tensor file {path}: {reason}")]
    TensorFile { path: String, reason: String },

    #[error("dataset manifest mismatch for {file}: {reason}")]
    ManifestMismatch { file: String, reason: String },

    #[error("unsupported report schema {found:?}, expected {expected:?}")]
    SchemaVersion { found: String, expected: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidArgument { op, reason: reason.into() }
    }
}
