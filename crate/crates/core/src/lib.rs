//! Sparse linear attention, FP8 E4M3 fake-quantization with straight-through
//! gradients, and partial attention distillation on toy transformers.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod fp8;
pub mod qlinear;
pub mod model;
pub mod sla;
pub mod tensor;

pub use error::{Error, Result};
