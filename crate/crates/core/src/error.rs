use sparc_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("{objective} needs at least 2 pairs in the batch, got {batch}")]
    TooFewPairs {
        objective: &'static str,
        batch: usize,
    },
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unknown objective {0}")]
    UnknownObjective(String),
    #[error("invalid metric input: {0}")]
    Metric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
