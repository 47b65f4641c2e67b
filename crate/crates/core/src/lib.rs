//! Pixel-space toy diffusion inpainting with adversarial protection.
//!
//! The crate trains a small ε-prediction denoiser (standard and inpainting
//! variants), crafts ℓ∞-bounded protective perturbations against it, and
//! measures how much those perturbations disturb downstream edits.

pub mod bench;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod mask;
pub mod protect;
pub mod purify;
pub mod seed;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
