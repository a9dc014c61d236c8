//! Disentangled sequence clustering VAE.
//!
//! A sequence model with a time-invariant global latent clustered by a
//! Gaussian mixture prior over a discrete intent variable, and
//! per-timestep local latents driven by a recurrent state. Includes the
//! static Gaussian-mixture VAE it builds on, VRNN / disentangled /
//! supervised baselines, a synthetic wheelchair navigation dataset and the
//! evaluation protocol.

pub mod baselines;
pub mod blob;
pub mod checkpoint;
pub mod discvae;
pub mod dist;
pub mod error;
pub mod evaluation;
pub mod gmvae;
pub mod graph;
pub mod model;
pub mod nn;
pub mod seq;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
