//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are either constants,
//! tracked inputs, or parameters pulled from a [`ParamStore`]; every operation
//! appends a node, and [`Graph::backward`] walks the node list in reverse.
//!
//! Besides the usual dense-network operations the graph supports the two
//! gradient-routing primitives the training code relies on:
//! [`Graph::stop_gradient`] (the operand is treated as a constant) and
//! [`Graph::grad_reverse`] (identity forward, `-alpha * grad` backward).

pub mod check;
mod graph;
pub mod nn;
pub mod optim;
mod tensor;

pub use graph::{Gradients, Graph, RoiBox, Var};
pub use nn::{ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
