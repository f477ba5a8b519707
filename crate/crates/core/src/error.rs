use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid model, training or CLI configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed or missing dataset content.
    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CheckpointCrc { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration, 3 = data/IO, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numeric(_) => 4,
            Error::Dimension(_)
            | Error::Data { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointCrc { .. }
            | Error::CheckpointFormat(_)
            | Error::Io { .. } => 3,
        }
    }
}
