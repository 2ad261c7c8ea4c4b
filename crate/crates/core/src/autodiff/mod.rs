//! Reverse-mode automatic differentiation over batched tensors.
//!
//! Derivatives of network outputs with respect to the time input are not
//! taken by a second reverse sweep. Instead the tangent `d/dt` is pushed
//! forward alongside the primal values as ordinary ops on the same tape
//! (see [`crate::neural::Network::forward_with_time_derivative`]), so the
//! reverse sweep differentiates through it like any other quantity.

mod ops;
mod tape;
mod tensor;

pub use ops::{sigmoid, silu, silu_prime, silu_second, softplus, softplus_inv};
pub use tape::{Checkpoint, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
