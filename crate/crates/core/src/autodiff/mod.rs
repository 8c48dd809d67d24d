//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Only the operations the policy network and the differentiable episode
//! need are provided. Every rule is covered by a finite-difference check.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_on};
pub use tape::{Elementwise, Gradients, NodeId, OpTag, Reduction, Tape};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
