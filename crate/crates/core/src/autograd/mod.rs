//! Minimal reverse-mode automatic differentiation over `ndarray` buffers.
//!
//! Every network in this crate is expressed as a graph on a [`Tape`]; the same
//! graph code runs in `f32` for training and in `f64` for gradient checks.

mod kernels;
mod scalar;
mod tape;

pub mod gradcheck;

pub use scalar::{sc, Scalar};
pub use tape::{BackwardMode, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
