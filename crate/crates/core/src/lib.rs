// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod parallel;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub mod checkpoint;
pub mod data;
pub mod detection;
pub mod eval;
pub mod ga;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
pub mod train;
