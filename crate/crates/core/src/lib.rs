//! Token-level importance-aware layer-wise quantization (TLQ) calibration.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64`/`*32` aliases below fix the precision.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod codec;
pub mod distcal;
pub mod error;
pub mod importance;
pub mod model;
pub mod quantizer;
pub mod rng;
pub mod scalar;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type LayerStack64 = model::LayerStack<f64>;
pub type LayerStack32 = model::LayerStack<f32>;
pub type CalibSet64 = model::CalibSet<f64>;
pub type CalibSet32 = model::CalibSet<f32>;
