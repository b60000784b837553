//! Spatial-camera-motion (SCM) attention for multi-view video diffusion,
//! with three ways of skipping its work across denoising steps: a rolling
//! cache that reuses block attention outputs, semantic top-K token pruning
//! that refills pruned positions from that cache, and a scheduler that
//! bypasses intermediate chains once cached outputs stop changing.

pub mod attention;
pub mod cache;
pub mod cost;
pub mod denoiser;
pub mod error;
pub mod pruning;
pub mod rng;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
