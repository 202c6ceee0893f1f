//! Multi-task ultrasound segmentation and classification engine.
//!
//! A ConvNeXt-style encoder feeds a UPerNet segmentation decoder and a pair
//! of 2-way/4-way classification heads; categorical prompts are projected
//! into per-channel offsets added to every encoder scale. Everything runs on
//! a small reverse-mode differentiation tape in `f64`.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
