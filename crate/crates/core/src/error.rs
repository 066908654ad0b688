use std::path::PathBuf;

use okapi_autodiff::AutodiffError;
use thiserror::Error;

use crate::protocol::RankParseError;
use crate::teacher::{Message, TeacherError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("checkpoint role is {found}, expected {expected}")]
    Role { expected: String, found: String },
    #[error("{stage}: non-finite loss at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("protocol: {msg}")]
    Protocol { msg: String, transcript: Vec<Message> },
    #[error(transparent)]
    RankParse(#[from] RankParseError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {} of {total} lines malformed (first at line {})", malformed.len(), malformed[0].0)]
    Dataset {
        path: PathBuf,
        total: usize,
        malformed: Vec<(usize, String)>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for configuration problems, including ones raised inside a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Teacher(TeacherError::Config(_)) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
