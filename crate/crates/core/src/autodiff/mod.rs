//! Reverse-mode automatic differentiation over the closed set of ops the
//! segmentation network uses.

mod graph;
pub mod kernels;

pub use graph::{BatchStats, Graph, Var};
pub use kernels::Padding;
