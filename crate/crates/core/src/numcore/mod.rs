//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod graph;
mod params;
mod tensor;

pub use graph::{BinaryOp, Graph, NodeId, UnaryOp};
pub use params::{Gradients, ParamId, ParamStore, Tape};
pub use tensor::{log_softmax, softmax, Tensor};

pub(crate) use graph::sigmoid;
