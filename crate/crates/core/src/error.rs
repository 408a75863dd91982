use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value at {stage} (step {step})")]
    NonFinite { stage: String, step: usize },

    #[error("schema violation in scenario {id}: {reason}")]
    Schema { id: String, reason: String },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("checkpoint length mismatch: manifest expects {expected} floats, blob holds {actual}")]
    CheckpointLength { expected: usize, actual: usize },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("missing dataset source `{0}`")]
    MissingSource(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
