use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KwsError>;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("routing error: branch {branch} requested but only {branches} branch(es) exist")]
    Routing { branch: usize, branches: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("file error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KwsError {
    /// Stable process exit code: 1 config, 2 data/file, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            KwsError::Numeric(_) => 3,
            KwsError::Format(_)
            | KwsError::Version { .. }
            | KwsError::Integrity(_)
            | KwsError::Data(_)
            | KwsError::Io { .. } => 2,
            KwsError::Config { .. }
            | KwsError::Dimension(_)
            | KwsError::Index(_)
            | KwsError::Contract(_)
            | KwsError::Routing { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        KwsError::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
