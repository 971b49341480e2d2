use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio error in {path}: {message}")]
    Audio { path: PathBuf, message: String },
    #[error("missing transcript for {0}")]
    MissingTranscript(PathBuf),
    #[error("empty corpus at {0}")]
    EmptyCorpus(PathBuf),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid plan parameters: {0}")]
    Plan(String),
    #[error("word budget miss: |dW|/W = {relative:.4} exceeds tolerance {tolerance}; try a different seed or n")]
    WordBudget { relative: f64, tolerance: f64 },
    #[error("multi-prompt mode infeasible, speakers below quota: {0:?}")]
    PromptDeficit(Vec<String>),
    #[error("insufficient noise: {0}")]
    InsufficientNoise(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("synthesis of request {index} failed: {message}")]
    PlanAborted { index: usize, message: String },
    #[error("SNR undefined: {0} is silent")]
    Silent(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.4e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("plugin {name}: {message}")]
    Plugin { name: String, message: String },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
