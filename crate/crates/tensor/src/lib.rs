//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values are row-major `f64` arrays. Ops are recorded on a [`Graph`] as they
//! execute; [`Graph::backward`] fills gradients for every node that depends on
//! a parameter. Each graph also tallies arithmetic work and can report peak
//! live memory for the recorded pass.

mod backward;
pub mod counter;
pub mod error;
pub mod gradcheck;
mod graph;
mod op;
mod shape;
mod tensor;

pub use counter::{Counts, OpCounter};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Precision, Var};
pub use tensor::{pairwise_sum, Tensor};
