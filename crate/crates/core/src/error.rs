use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor op `{op}`: {msg}")]
    Tensor { op: &'static str, msg: String },

    #[error("tensor op `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("scene generation: {0}")]
    Scene(String),

    #[error("conditioning: {0}")]
    Conditioning(String),

    #[error("detector: {0}")]
    Detector(String),

    #[error("attribute: {0}")]
    Attribute(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("checkpoint `{path}`: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("dataset `{path}`: {msg}")]
    Dataset { path: String, msg: String },

    #[error("config `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("training diverged: loss became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn tensor(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Tensor { op, msg: msg.into() }
    }
}
