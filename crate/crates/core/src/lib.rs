#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod distill;
pub mod error;
pub mod format;
pub mod importance;
pub mod kernels;
pub mod model;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
