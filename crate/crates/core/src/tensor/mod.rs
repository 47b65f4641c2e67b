//! Dense f32 tensors, a static compute graph with reverse-mode
//! differentiation, an adaptive-moment optimizer and the checkpoint format.

mod array;
pub mod checkpoint;
mod gemm;
pub mod graph;
mod kernels;
pub mod optim;

pub use array::Tensor;
pub use graph::{Activations, Feed, Graph, GraphBuilder, LeafKind, NodeId};
pub use optim::{Adam, AdamConfig};
