//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, gradient_check_many, gradient_check_mode};
pub use graph::{Gradients, Graph, Mode, Unary, Var};
pub use tensor::Tensor;
