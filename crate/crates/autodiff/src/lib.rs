//! Dense row-major tensors with a recording graph for reverse-mode
//! differentiation.
//!
//! Every forward op is deterministic: reductions run in a fixed order and
//! matrix products go through a single-threaded blocked kernel, so identical
//! inputs give bit-identical outputs.

mod error;
mod float;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use gradcheck::{grad_check, grad_check_graph, grad_check_with, relative_error, sample_coords, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, Var};
pub use ops::pool::PoolKind;
pub use tensor::{numel, Tensor};
