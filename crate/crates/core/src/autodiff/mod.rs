//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! walks the record in reverse. Graphs are built fresh for every training
//! step and dropped afterwards.

mod backward;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Function, Graph, OpKind, Var};
pub use tensor::Tensor;
