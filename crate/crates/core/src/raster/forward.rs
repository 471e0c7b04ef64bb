//! Front-to-back alpha blending: tiled fast path and exhaustive oracle.

use nalgebra::Matrix2;

use super::project::{project, CameraS};
use super::{BackwardCtx, RenderConfig, RenderOutput, SplatCtx};
use crate::camera::CameraPose;
use crate::error::Result;
use crate::gaussian::GaussianCloud;
use crate::real::Real;

/// Opacity saturation guard: keeps 1 - sigma strictly positive so the
/// backward pass never divides by zero.
const SIGMA_MAX_MARGIN: f64 = 1e-6;

struct Prepared<S> {
    splats: Vec<SplatCtx<S>>,
    /// Parallel to `splats`: screen-space footprint radius in pixels.
    radii: Vec<S>,
    culled: usize,
    skipped_singular: usize,
}

/// Project, invert covariances, and depth-sort. Shared by both paths so
/// the tiled and naive renders see identical splats in identical order.
fn prepare<S: Real>(
    cloud: &GaussianCloud<S>,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<Prepared<S>> {
    let projected = project(cloud, pose, cfg)?;
    let culled = cloud.len() - projected.len();
    let cam = CameraS::<S>::from_pose(pose);
    let w2c = cam.rotation.transpose();
    let sigmas = S::of(cfg.footprint_sigmas());
    let mut splats = Vec::with_capacity(projected.len());
    let mut radii = Vec::with_capacity(projected.len());
    let mut skipped_singular = 0usize;
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .view_depth
            .partial_cmp(&projected[b].view_depth)
            .unwrap()
            .then(projected[a].source_index.cmp(&projected[b].source_index))
    });
    for idx in order {
        let p = &projected[idx];
        let c = &p.cov2d;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        if !(det > S::zero()) || !det.is_finite() {
            skipped_singular += 1;
            continue;
        }
        let inv_det = S::one() / det;
        let inv_cov = Matrix2::new(
            c[(1, 1)] * inv_det,
            -c[(0, 1)] * inv_det,
            -c[(1, 0)] * inv_det,
            c[(0, 0)] * inv_det,
        );
        let prim = &cloud.primitives[p.source_index];
        let q = w2c * (prim.mu - cam.translation);
        splats.push(SplatCtx {
            source: p.source_index,
            mean2d: p.mean2d,
            inv_cov,
            q,
            quat: prim.quat,
            scale: prim.scale,
            opacity: prim.opacity,
            color: prim.color,
        });
        radii.push(sigmas * super::max_eigen_2x2(c).sqrt());
    }
    Ok(Prepared { splats, radii, culled, skipped_singular })
}

/// sigma = opacity * exp(-1/2 Delta^T Sigma'^{-1} Delta), clamped below 1.
fn splat_sigma<S: Real>(splat: &SplatCtx<S>, px: S, py: S) -> S {
    let dx = px - splat.mean2d.x;
    let dy = py - splat.mean2d.y;
    let a = &splat.inv_cov;
    let quad = a[(0, 0)] * dx * dx + S::of(2.0) * a[(0, 1)] * dx * dy + a[(1, 1)] * dy * dy;
    if quad < S::zero() {
        return S::zero();
    }
    let sigma = splat.opacity * (-quad * S::of(0.5)).exp();
    sigma.min(S::of(1.0 - SIGMA_MAX_MARGIN))
}

fn blank_output<S: Real>(pose: &CameraPose, cfg: &RenderConfig) -> (Vec<S>, Vec<S>, Vec<Vec<(u32, S)>>) {
    let n = pose.width * pose.height;
    let mut image = vec![S::zero(); n * 3];
    for px in image.chunks_exact_mut(3) {
        for ch in 0..3 {
            px[ch] = S::of(cfg.background[ch]);
        }
    }
    (image, vec![S::zero(); n], vec![Vec::new(); n])
}

/// Blend one pixel over `candidates` (indices into `splats`, already
/// front-to-back). `early_stop` enables the transmittance floor cutoff.
#[allow(clippy::too_many_arguments)]
fn blend_pixel<S: Real>(
    splats: &[SplatCtx<S>],
    candidates: impl Iterator<Item = usize>,
    px: S,
    py: S,
    cfg: &RenderConfig,
    early_stop: bool,
    image_px: &mut [S],
    alpha_px: &mut S,
    record: &mut Vec<(u32, S)>,
) {
    let threshold = S::of(cfg.alpha_threshold);
    let floor = S::of(cfg.transmittance_floor);
    let mut transmittance = S::one();
    let mut color = [S::zero(); 3];
    for si in candidates {
        if early_stop && transmittance < floor {
            break;
        }
        let sigma = splat_sigma(&splats[si], px, py);
        if sigma < threshold {
            continue;
        }
        let weight = sigma * transmittance;
        for ch in 0..3 {
            color[ch] += splats[si].color[ch] * weight;
        }
        transmittance *= S::one() - sigma;
        record.push((si as u32, sigma));
    }
    for ch in 0..3 {
        image_px[ch] = color[ch] + S::of(cfg.background[ch]) * transmittance;
    }
    *alpha_px = S::one() - transmittance;
}

fn finish<S: Real>(
    pose: &CameraPose,
    cfg: &RenderConfig,
    prep: Prepared<S>,
    image: Vec<S>,
    alpha: Vec<S>,
    records: Vec<Vec<(u32, S)>>,
) -> RenderOutput<S> {
    let cam = CameraS::<S>::from_pose(pose);
    RenderOutput {
        width: pose.width,
        height: pose.height,
        image,
        alpha,
        culled: prep.culled,
        skipped_singular: prep.skipped_singular,
        records: Some(records),
        ctx: Some(BackwardCtx {
            splats: prep.splats,
            rotation: cam.rotation,
            fx: cam.fx,
            fy: cam.fy,
            background: [S::of(cfg.background[0]), S::of(cfg.background[1]), S::of(cfg.background[2])],
            n_primitives: 0,
        }),
    }
}

/// Tiled renderer: splats are binned into `tile_size` pixel tiles by their
/// screen-space footprint, then blended front to back per pixel with an
/// early stop once transmittance drops below the configured floor.
pub fn render<S: Real>(
    cloud: &GaussianCloud<S>,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<RenderOutput<S>> {
    let prep = prepare(cloud, pose, cfg)?;
    let (mut image, mut alpha, mut records) = blank_output(pose, cfg);
    let (w, h, ts) = (pose.width, pose.height, cfg.tile_size);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, splat) in prep.splats.iter().enumerate() {
        let r = prep.radii[si].to_f64();
        let mx = splat.mean2d.x.to_f64();
        let my = splat.mean2d.y.to_f64();
        if !(mx.is_finite() && my.is_finite()) {
            continue;
        }
        let (x0, x1, y0, y1) = if r.is_finite() {
            if mx + r < 0.0 || my + r < 0.0 || mx - r > w as f64 || my - r > h as f64 {
                continue;
            }
            // pixel centers sit at (col + 0.5, row + 0.5)
            (
                (((mx - r - 0.5).floor().max(0.0)) as usize).min(w - 1) / ts,
                (((mx + r - 0.5).ceil().max(0.0)) as usize).min(w - 1) / ts,
                (((my - r - 0.5).floor().max(0.0)) as usize).min(h - 1) / ts,
                (((my + r - 0.5).ceil().max(0.0)) as usize).min(h - 1) / ts,
            )
        } else {
            // zero blend threshold: unbounded footprint, bin everywhere
            (0, tiles_x - 1, 0, tiles_y - 1)
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(si);
            }
        }
    }
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[ty * tiles_x + tx];
            if bin.is_empty() {
                continue;
            }
            for row in ty * ts..((ty + 1) * ts).min(h) {
                for col in tx * ts..((tx + 1) * ts).min(w) {
                    let px = S::of(col as f64 + 0.5);
                    let py = S::of(row as f64 + 0.5);
                    let pi = row * w + col;
                    let mut a = S::zero();
                    blend_pixel(
                        &prep.splats,
                        bin.iter().copied(),
                        px,
                        py,
                        cfg,
                        true,
                        &mut image[pi * 3..pi * 3 + 3],
                        &mut a,
                        &mut records[pi],
                    );
                    alpha[pi] = a;
                }
            }
        }
    }
    let mut out = finish(pose, cfg, prep, image, alpha, records);
    out.ctx.as_mut().unwrap().n_primitives = cloud.len();
    Ok(out)
}

/// Exhaustive oracle: every pixel considers every splat, no footprint
/// test and no early stop. Same blend arithmetic as `render`.
pub fn render_naive<S: Real>(
    cloud: &GaussianCloud<S>,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<RenderOutput<S>> {
    let prep = prepare(cloud, pose, cfg)?;
    let (mut image, mut alpha, mut records) = blank_output(pose, cfg);
    let (w, h) = (pose.width, pose.height);
    for row in 0..h {
        for col in 0..w {
            let px = S::of(col as f64 + 0.5);
            let py = S::of(row as f64 + 0.5);
            let pi = row * w + col;
            let mut a = S::zero();
            blend_pixel(
                &prep.splats,
                0..prep.splats.len(),
                px,
                py,
                cfg,
                false,
                &mut image[pi * 3..pi * 3 + 3],
                &mut a,
                &mut records[pi],
            );
            alpha[pi] = a;
        }
    }
    let mut out = finish(pose, cfg, prep, image, alpha, records);
    out.ctx.as_mut().unwrap().n_primitives = cloud.len();
    Ok(out)
}
