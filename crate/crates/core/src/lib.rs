//! Sensitivity-driven 8-bit/4-bit quantization of convolution strips and an
//! exact functional model of their execution on ReRAM crossbars.
//!
//! The pipeline is: [`strips::score_strips`] ranks every `1×1×D` strip of
//! each convolution kernel, [`threshold::optimize_threshold`] picks the
//! precision split that keeps the empirical Fisher diagonal closest to the
//! original, [`threshold::aligned_map`] rounds the 8-bit cluster to whole
//! tiles, [`quant::compress_with_map`] quantizes, and [`crossbar`] places,
//! executes and costs the result.

pub mod crossbar;
pub mod error;
pub mod fixtures;
pub mod quant;
pub mod strips;
pub mod tensor;
pub mod threshold;

pub use error::{CimError, Result};
pub use tensor::Tensor;
