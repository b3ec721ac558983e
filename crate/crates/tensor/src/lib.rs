//! Dense `f64` tensors with a dynamically recorded graph and reverse-mode
//! differentiation. Gradients are built from the same differentiable ops as
//! the forward pass, so they can be differentiated again.

mod array;
mod backward;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use array::{numel, Array};
pub use backward::grad;
pub use tensor::{is_grad_enabled, no_grad, without_grad, NoGradGuard, Tensor};
