use std::path::PathBuf;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss, gradient or likelihood became non-finite.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// A line-oriented file could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A configuration file failed validation. Every offending field is listed.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A checkpoint does not match the architecture requested by the config.
    #[error("architecture mismatch: checkpoint has {found}, config expects {expected}")]
    ArchMismatch { expected: String, found: String },

    /// Semi-online training could not make progress.
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
