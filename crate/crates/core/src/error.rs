use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("could not place objects for scene seed {seed} after {attempts} attempts")]
    Placement { seed: u64, attempts: usize },

    #[error("no uniquely identifiable referent for a {qtype} question")]
    TemplateExhausted { qtype: &'static str },

    #[error("unknown token `{0}` (question vocabulary is closed)")]
    UnknownToken(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("answer index {index} outside answer vocabulary of size {size}")]
    AnswerOutOfRange { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: usize, what: String },

    #[error("rate is undefined over an empty record set")]
    EmptyRecords,

    #[error("requested {requested} study tasks but only {available} records exist")]
    NotEnoughRecords { requested: usize, available: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
