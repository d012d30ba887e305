//! Minimal reverse-mode differentiation over dense NHWC tensors.
//!
//! A [`Tape`] records every op of one forward evaluation; [`Tape::backward`]
//! sweeps it in reverse. Kernels are single-threaded and deterministic, so
//! identical inputs give bitwise-identical values and gradients.

mod array;
pub mod image_ops;
pub mod nn;
mod ops;
pub mod real;
mod tape;

pub use array::Tensor;
pub use real::Real;
pub use tape::{Grads, Tape, Var};
