//! Differentiable tile-based splatting.
//!
//! `project` maps 3D Gaussians to screen space (EWA-style affine
//! approximation), `render` blends them tile by tile front-to-back,
//! `render_naive` is the exhaustive oracle with identical blend math,
//! and `render_backward` is the analytic backward pass through blending,
//! projection and the covariance parameterization.

mod backward;
mod forward;
mod project;

pub use backward::render_backward;
pub use forward::{render, render_naive};
pub use project::project;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::real::Real;

/// Rendering configuration. Defaults: 16 px tiles, black background,
/// 1/255 blend threshold, 1e-4 early-stop transmittance, 0.3 px^2
/// covariance regularization, blend-threshold-matched footprint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    pub near_cull: f64,
    pub far_cull: f64,
    /// Minimum per-splat blend contribution sigma; applied identically in
    /// the tiled and naive paths so the two stay comparable.
    pub alpha_threshold: f64,
    /// Early-stop transmittance, tiled path only.
    pub transmittance_floor: f64,
    /// Added to the 2D covariance diagonal, px^2.
    pub cov_regularization: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            background: [0.0; 3],
            near_cull: 0.01,
            far_cull: 1000.0,
            alpha_threshold: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            cov_regularization: 0.3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32].contains(&self.tile_size) {
            return Err(Error::contract(format!("tile_size must be 8, 16 or 32, got {}", self.tile_size)));
        }
        if !(0.0 < self.near_cull && self.near_cull < self.far_cull) {
            return Err(Error::contract(format!(
                "cull range needs 0 < near < far, got [{}, {}]",
                self.near_cull, self.far_cull
            )));
        }
        Ok(())
    }

    /// Footprint radius in units of sqrt(lambda_max) that guarantees every
    /// splat outside it falls below the blend threshold.
    pub(crate) fn footprint_sigmas(&self) -> f64 {
        if self.alpha_threshold > 0.0 {
            (2.0 * (1.0 / self.alpha_threshold).ln()).sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// Screen-space Gaussian after projection.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian<S> {
    pub mean2d: Vector2<S>,
    pub cov2d: Matrix2<S>,
    pub view_depth: S,
    pub source_index: usize,
}

/// Per-splat state retained for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SplatCtx<S> {
    pub source: usize,
    pub mean2d: Vector2<S>,
    pub inv_cov: Matrix2<S>,
    /// Camera-space position of the mean.
    pub q: Vector3<S>,
    pub quat: [S; 4],
    pub scale: Vector3<S>,
    pub opacity: S,
    pub color: [S; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct BackwardCtx<S> {
    pub splats: Vec<SplatCtx<S>>,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<S>,
    pub fx: S,
    pub fy: S,
    pub background: [S; 3],
    pub n_primitives: usize,
}

/// Rendered image plus the blend records needed for backward.
pub struct RenderOutput<S> {
    pub width: usize,
    pub height: usize,
    /// H x W x 3, row-major, in [0,1].
    pub image: Vec<S>,
    /// H x W accumulated opacity.
    pub alpha: Vec<S>,
    /// Splats dropped by depth culling.
    pub culled: usize,
    /// Splats skipped for non-invertible 2D covariance.
    pub skipped_singular: usize,
    /// Per pixel, ordered (splat, sigma) contributions.
    pub(crate) records: Option<Vec<Vec<(u32, S)>>>,
    pub(crate) ctx: Option<BackwardCtx<S>>,
}

impl<S: Real> RenderOutput<S> {
    /// Free the backward state when only the image is needed.
    pub fn drop_records(&mut self) {
        self.records = None;
        self.ctx = None;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [S; 3] {
        let base = (row * self.width + col) * 3;
        [self.image[base], self.image[base + 1], self.image[base + 2]]
    }
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub(crate) fn max_eigen_2x2<S: Real>(m: &Matrix2<S>) -> S {
    let half_trace = (m[(0, 0)] + m[(1, 1)]) * S::of(0.5);
    let det_part = ((m[(0, 0)] - m[(1, 1)]) * S::of(0.5)).powi(2) + m[(0, 1)] * m[(0, 1)];
    half_trace + det_part.sqrt()
}
