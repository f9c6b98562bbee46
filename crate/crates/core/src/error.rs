use std::path::PathBuf;

use cmd_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("{what} has size {got}, expected {expected}")]
    Size { what: String, expected: String, got: String },
    #[error("no mask for image stem `{0}`")]
    MissingMask(String),
    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("condition provider unavailable: {0}")]
    Provider(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("corrupt or incompatible file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CmdError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CmdError::Io { context: context.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CmdError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        CmdError::Domain(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CmdError::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit status: 2 for configuration or argument errors, 3 for
    /// data and I/O errors, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) | CmdError::Domain(_) => 2,
            CmdError::NonFinite { .. } => 4,
            CmdError::Tensor(_)
            | CmdError::Size { .. }
            | CmdError::MissingMask(_)
            | CmdError::Decode { .. }
            | CmdError::Provider(_)
            | CmdError::Format { .. }
            | CmdError::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = CmdError> = std::result::Result<T, E>;
