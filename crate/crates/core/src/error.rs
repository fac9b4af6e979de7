use thiserror::Error;

pub type Result<T> = std::result::Result<T, NdcError>;

#[derive(Debug, Error)]
pub enum NdcError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid timestep subset: {0}")]
    InvalidSubset(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint has bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("checkpoint truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NdcError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        NdcError::InvalidArgument(msg.into())
    }

    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, NdcError::Config { .. })
    }
}
