//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is intentionally small: a [`Tensor`] value type, plain
//! [`kernels`] for the heavy ops and a [`Graph`] tape that records every op
//! and replays it backwards. All ops check their output for NaN/Inf.

pub mod graph;
pub mod kernels;
pub mod linalg;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Origin, Var};
pub use real::{Precision, Real};
pub use tensor::Tensor;
