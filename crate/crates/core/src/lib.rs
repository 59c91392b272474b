//! Segmentation-augmented adversarial image registration.

pub mod error;
pub mod harness;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod perceptual;
pub mod sart;
pub mod training;
pub mod transfer;

pub use error::{Result, SarError};
