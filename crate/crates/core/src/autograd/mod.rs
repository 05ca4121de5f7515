//! Reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated. Calling
//! [`Graph::backward`] on a scalar node returns the gradient of that scalar
//! with respect to every node that depends on a gradient-requiring leaf.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheck, GRAD_NORM_FLOOR};
pub use graph::{Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::{matmul, Tensor};
