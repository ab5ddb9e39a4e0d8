//! Multi-task optic disc and exudate segmentation.
//!
//! A small dense tensor library with reverse-mode differentiation underpins
//! U-net, S-net and W-net builders, a class-balanced multi-task loss, an Adam
//! training harness with k-fold cross-validation, and lesion-level evaluation.

mod error;

pub mod data;
pub mod evaluation;
pub mod loss;
pub mod models;
pub mod preprocess;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
