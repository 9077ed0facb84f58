//! Attention locality analysis and pyramid-convolution attention replacement.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod cost;
pub mod counting;
pub mod delta_conv;
pub mod distill;
pub mod dtf;
pub mod gradcheck;
pub mod locality;
pub mod error;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use counting::Counted;
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
