//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op eagerly computes its value and, when any input requires a
//! gradient, records a backward closure on the output. [`Tensor::backward`]
//! walks the recorded graph in reverse construction order and accumulates
//! gradients into each reachable tensor.

mod error;
pub mod gradcheck;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{broadcast_shape, sigmoid_value};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
