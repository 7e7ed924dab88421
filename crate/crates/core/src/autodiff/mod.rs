//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
mod optim;
mod tensor;

pub use graph::{log_softmax_rows, softmax_rows, Graph, NodeId};
pub use optim::Sgd;
pub use tensor::Tensor;
