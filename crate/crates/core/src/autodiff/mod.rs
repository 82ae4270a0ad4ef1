//! Minimal deterministic reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_directional, finite_diff_entry, finite_diff_grad, relative_error};
pub use graph::{GradScaleHook, Gradients, Graph, HookHandle, NodeId, Var};
pub use rng::{RngState, Stream};
pub use tensor::Tensor;
