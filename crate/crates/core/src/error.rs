use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
    Usage,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown task `{name}`; registered heads: [{}]", registered.join(", "))]
    UnknownTask { name: String, registered: Vec<String> },

    #[error("{path}:{line}: {message}")]
    DataLine { path: String, line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {value} for task `{task}` (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        task: String,
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownTask { .. } => ErrorKind::Config,
            Error::DataLine { .. } | Error::Data(_) | Error::Checkpoint(_) => ErrorKind::Data,
            Error::NumericDomain(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Io { .. } => ErrorKind::Io,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::MissingGrad(_) => ErrorKind::Usage,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
