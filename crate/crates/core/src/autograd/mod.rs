//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks it in
//! reverse. Loss kernels (focal, GIoU, cross-entropy, etc.) are fused nodes
//! with closed-form gradients instead of compositions of primitives.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var, MAX_LOG_SCALE};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{decode_one, giou_terms, sigmoid};
