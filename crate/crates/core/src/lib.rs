#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod continual;
mod codec;
pub mod data;
pub mod error;
pub mod meat;
pub mod seed;
pub mod vit;

pub use error::{Error, Result};
