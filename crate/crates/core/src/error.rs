use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {symbol:?} in word {word:?}")]
    UnknownSymbol { symbol: String, word: String },

    #[error("token id {0} is not a valid ordinary token")]
    InvalidToken(u32),

    #[error("invalid phrase: {0}")]
    InvalidPhrase(String),

    #[error("non-finite value in {location}")]
    Numerical { location: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        trace: Vec<crate::trainer::EpochLoss>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn numerical(location: impl Into<String>) -> Self {
        Error::Numerical {
            location: location.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
