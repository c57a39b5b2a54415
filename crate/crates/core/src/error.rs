use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid knowledge graph: {0}")]
    Graph(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("sequence of length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stage `{stage}` requires {missing}")]
    Staging { stage: String, missing: String },
    #[error("non-finite loss at step {step} of stage `{stage}` (last finite loss {last:?})")]
    NonFinite {
        stage: String,
        step: usize,
        last: Option<f64>,
    },
    #[error("frozen backbone was modified during stage `{0}`")]
    FrozenViolation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("model not loaded")]
    ServiceUnavailable,
    #[error("template has {slots} slot(s) but no ranked items were supplied")]
    NoRecommendations { slots: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
