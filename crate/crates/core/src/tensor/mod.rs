//! Dense `f64` tensors and the reverse-mode tape that differentiates them.

pub(crate) mod kernels;
mod tape;
mod value;

pub use tape::{Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
