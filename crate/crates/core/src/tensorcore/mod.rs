//! Dense tensors and a small reverse-mode autodiff tape.

mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, GraphNode, NodeId, Op};
pub use tensor::{argmax_channels, softmax_channels, Real, Tensor};

#[cfg(test)]
mod tests;
