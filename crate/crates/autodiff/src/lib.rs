//! Reverse-mode automatic differentiation for small 2D convolutional models.
//!
//! The engine is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod adam;
pub mod conv;
mod graph;
mod real;
mod tensor;
pub mod warp;

pub use adam::{AdamConfig, AdamState};
pub use graph::{BnMode, BnStats, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
