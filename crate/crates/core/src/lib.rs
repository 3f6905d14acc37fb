//! Quantization-aware training for super-resolution networks with
//! dynamic dual trainable activation bounds.

pub mod calibration;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod models;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
