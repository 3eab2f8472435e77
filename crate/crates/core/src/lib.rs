//! Age-gap reducing conditional GAN.
//!
//! Five networks (representor, generator, face discriminator, latent
//! discriminator, age-group estimator) are trained under a composite
//! objective of identity, age-gap, total-variation and two adversarial
//! terms. Everything runs on a small f64 reverse-mode autodiff engine.

pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
