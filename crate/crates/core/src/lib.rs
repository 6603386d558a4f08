//! Pixel-input vision-language pretraining with auxiliary visual losses.

pub mod assignment;
pub mod error;
pub mod kv;
pub mod losses;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
