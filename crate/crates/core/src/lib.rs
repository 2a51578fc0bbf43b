//! Sector-masked latent diffusion for ultrasound-like images, desk scale:
//! a Γ-distribution VAE, a SPADE-conditioned denoiser, probability-flow ODE
//! samplers over VE/VP/EDM schedules, a synthetic phantom generator, and a
//! downstream-task evaluation harness.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod gamma;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod sector;
pub mod spade;
pub mod phantom;
pub mod special;
pub mod tensor;
pub mod threads;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::{no_grad, Element, Tensor};

/// Epsilon added to (biased) variance before the square root in every
/// normalization path.
pub const NORM_EPS: f64 = 1e-5;
