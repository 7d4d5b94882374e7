use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("corpus incomplete: no descriptions for {}", .labels.join(", "))]
    CorpusIncomplete { labels: Vec<String> },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("parse error in {path}{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("LLM transport error: {0}")]
    Transport(String),

    #[error("stale embedding cache {path}: {reason}")]
    StaleCache { path: PathBuf, reason: String },

    #[error("cache miss for item {0}")]
    CacheMiss(String),

    #[error(
        "non-finite loss at epoch {epoch} (lr {lr}); last batch ids: {}",
        .batch_ids.join(", ")
    )]
    NonFinite {
        epoch: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("{0}")]
    Runtime(String),

    #[error("encoder {encoder}: {message}")]
    Encoder { encoder: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Validation(_) | Error::Shape { .. } | Error::Degenerate(_) => {
                ErrorClass::Validation
            }
            Error::Data(_)
            | Error::CorpusIncomplete { .. }
            | Error::Consistency(_)
            | Error::Parse { .. }
            | Error::StaleCache { .. }
            | Error::CacheMiss(_) => ErrorClass::Data,
            Error::Transport(_)
            | Error::Runtime(_)
            | Error::NonFinite { .. }
            | Error::Encoder { .. }
            | Error::Io { .. } => ErrorClass::Runtime,
        }
    }
}
