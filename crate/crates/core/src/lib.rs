//! Fine-grained image-text alignment laboratory: a toy dual encoder, the
//! SPARC objective and its baselines, softmax dynamics experiments,
//! evaluation metrics and a compute/memory cost model.

pub mod cost;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod softmax_lab;

pub use error::{CoreError, Result};
