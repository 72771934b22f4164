//! Multi-class anomaly detection with a feature-reconstruction base model
//! refined by a conditional diffusion inpainting model.

pub mod base_recon;
pub mod checkpoint;
pub mod diffusion_core;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fusion;
pub mod inpaint;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
