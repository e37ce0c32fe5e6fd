//! Minimal dense-tensor engine with reverse-mode differentiation.

mod graph;
mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, grad_check_entries, DEFAULT_STEP};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
