//! Zero-shot video sampling from an image diffusion sampler.
//!
//! Frames share a correlated starting noise (the dependency noise model) and
//! are denoised jointly with temporal momentum attention, which blends
//! per-frame self-attention with attention to the first frame.

pub mod artifacts;
pub mod attention;
pub mod diffusion;
pub mod error;
pub mod noise;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
