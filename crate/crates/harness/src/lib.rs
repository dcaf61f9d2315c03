//! Experiment harness: planted synthetic data, AdamW training, held-out
//! evaluation, cost sweeps and plots, driven by the `sparc-lab` CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod plot;
pub mod recovery;
pub mod train;

pub use error::{HarnessError, Result};
