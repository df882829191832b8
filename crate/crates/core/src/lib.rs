//! Correlated video noise priors for diffusion models, with a tiny EDM
//! video denoiser, ODE samplers and inversion, procedural toy datasets and
//! the analysis harness that compares the priors.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common uses.

// Validation uses `!(x > 0.0)` so that NaN is rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod analysis;
pub mod config;
pub mod denoiser;
pub mod edm;
pub mod ndcore;
pub mod noise_prior;
pub mod sampler;
pub mod scalar;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF = ndcore::Tensor<f64>;
pub type TensorF32 = ndcore::Tensor<f32>;
pub type ModelF = denoiser::DenoiserModel<f64>;
pub type ModelF32 = denoiser::DenoiserModel<f32>;
