//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every value is stored as `f64`; reductions accumulate in `f64`.

mod graph;
mod kernels;
mod set;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use set::{GradSet, ParamSet, TensorSet};
pub use tensor::Tensor;
