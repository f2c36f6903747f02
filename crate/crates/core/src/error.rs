use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// The variant name doubles as the machine-readable prefix printed by the CLI
/// (`error[dimension]: ...`), see [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("training diverged at epoch {epoch} (lr {lr}): loss is not finite")]
    Divergence { epoch: usize, lr: f64 },
    #[error("restart {restart}: {source}")]
    Restart {
        restart: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Usage(_) => "usage",
            Error::Transfer(_) => "transfer",
            Error::Integrity(_) => "integrity",
            Error::Divergence { .. } => "divergence",
            Error::Restart { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 for usage/configuration problems (including
    /// missing input files), 1 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Restart { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
