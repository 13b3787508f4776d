//! Toy-scale one-step latent diffusion super-resolution.
//!
//! A small VAE and a text-conditioned U-Net are trained from scratch on procedurally generated
//! scenes. Restoration encodes the bicubic-upsampled LQ image, perturbs the latent once with
//! gradient-weighted noise, predicts that noise with the U-Net (whose stem features are
//! modulated by the pixel-unshuffled LQ image) and decodes the recovered latent.

pub mod adaptive_noise;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod schedule;
pub mod tmg;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
