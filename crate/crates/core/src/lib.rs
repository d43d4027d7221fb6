//! Desk-scale latent-diffusion image restoration.
//!
//! The crate trains a small conditional denoiser (frozen base U-Net plus a
//! trainable control branch) in the latent space of a pluggable autoencoder,
//! degrades clean images with a reproducible mixed-degradation engine, and
//! restores inputs with a deterministic DDIM sampler. The trainer supports
//! internal-detail-enhancement (IIDE) mix-up fine-tuning, where the image
//! condition is probabilistically replaced by the model's own intermediate
//! reconstruction of the clean image.

pub mod checkpoint;
pub mod codec;
pub mod condition;
pub mod dataset;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod restore;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Real;
