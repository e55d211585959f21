use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    /// A batch lacks a pair type required by the chosen loss.
    #[error("anchor {anchor}: {msg}")]
    Structural { anchor: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 3,
            Error::EmptyDataset | Error::Parse { .. } | Error::Data(_) => 4,
            Error::Structural { .. } | Error::Shape(_) | Error::Io { .. } | Error::Serde(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
