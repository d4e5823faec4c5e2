//! Instance-mask head trained on top of a frozen DETR-style detector.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
