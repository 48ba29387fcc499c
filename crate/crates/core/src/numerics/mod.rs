//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId, Operation};
pub use tensor::Tensor;
