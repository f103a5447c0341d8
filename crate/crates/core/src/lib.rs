//! SMAFormer: a U-shaped segmentation transformer built around
//! synergistic multi-attention blocks, with the autodiff engine, data
//! synthesis, training loop and metrics needed to train it from scratch.

pub mod data;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod json;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
