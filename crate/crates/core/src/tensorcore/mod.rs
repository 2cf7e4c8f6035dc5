//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! - [`Tensor`]: dense row-major array.
//! - [`Graph`]: per-pass tape of ops; [`Graph::backward`] fills gradients.
//! - [`ParamStore`] / [`Gradients`]: named trainable tensors and their grads.
//! - [`AdamState`]: the optimizer.
//!
//! In checked mode (the default) every op rejects non-finite outputs.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{AttentionLayout, Graph, Mask, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
