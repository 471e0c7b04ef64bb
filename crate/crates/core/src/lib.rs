//! Single-stage 3D Gaussian diffusion engine.
//!
//! The pipeline: a transformer denoiser maps a clean condition view plus
//! noisy views (each concatenated with a per-pixel ray embedding) to
//! pixel-aligned 3D Gaussian point clouds, rendered by a differentiable
//! tile-based rasterizer and trained/sampled with an x0-prediction
//! diffusion loop on procedurally generated scenes.

pub mod camera;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gaussian;
pub mod raster;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
