use std::path::PathBuf;

use sparc_core::CoreError;
use sparc_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config file: {0}")]
    ConfigSyntax(#[from] toml::de::Error),
    #[error("non-finite loss or gradient at step {step}; last good checkpoint {checkpoint}, dump {dump}")]
    NonFinite {
        step: usize,
        checkpoint: PathBuf,
        dump: PathBuf,
    },
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
