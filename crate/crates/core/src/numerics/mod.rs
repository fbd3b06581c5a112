//! Dense `f64` tensors, reverse-mode differentiation and the Adam optimizer.

pub mod adam;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use nn::Standardizer;
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

/// The computation record of a forward pass is the graph itself.
pub type ComputationRecord = Graph;
