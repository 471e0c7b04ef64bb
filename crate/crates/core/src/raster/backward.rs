//! Analytic backward pass through blending, projection and the
//! covariance parameterization.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};

use super::project::projection_jacobian;
use super::{RenderOutput, SplatCtx};
use crate::error::{Error, Result};
use crate::gaussian::{quat_to_rotation_grad, GaussianGrad};
use crate::real::Real;

/// Matches the forward clamp in `splat_sigma`; contributions stored at
/// exactly this value were saturated and get zero gradient.
const SIGMA_MAX: f64 = 1.0 - 1e-6;

/// Per-splat screen-space gradient accumulators.
struct SplatGrad<S> {
    color: [S; 3],
    opacity: S,
    mean2d: Vector2<S>,
    cov2d: Matrix2<S>,
}

impl<S: Real> Default for SplatGrad<S> {
    fn default() -> Self {
        SplatGrad {
            color: [S::zero(); 3],
            opacity: S::zero(),
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
        }
    }
}

/// Gradient of a scalar loss w.r.t. every input primitive, given the
/// loss gradient w.r.t. the rendered image (H x W x 3, row-major).
///
/// Differentiates exactly the function the forward pass computed: splats
/// that were culled, skipped or early-stopped contribute zero gradient.
pub fn render_backward<S: Real>(
    output: &RenderOutput<S>,
    grad_image: &[S],
) -> Result<Vec<GaussianGrad<S>>> {
    let (records, ctx) = match (&output.records, &output.ctx) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(Error::contract("render_backward: records were dropped")),
    };
    let n_px = output.width * output.height;
    if grad_image.len() != n_px * 3 {
        return Err(Error::contract(format!(
            "grad_image length {} != {} (H*W*3)",
            grad_image.len(),
            n_px * 3
        )));
    }
    let sigma_max = S::of(SIGMA_MAX);
    let half = S::of(0.5);
    let mut acc: Vec<SplatGrad<S>> = (0..ctx.splats.len()).map(|_| SplatGrad::default()).collect();

    let mut transmittances: Vec<S> = Vec::new();
    for pi in 0..n_px {
        let rec = &records[pi];
        let g = [grad_image[pi * 3], grad_image[pi * 3 + 1], grad_image[pi * 3 + 2]];
        if rec.is_empty() && g.iter().all(|v| *v == S::zero()) {
            continue;
        }
        let row = pi / output.width;
        let col = pi % output.width;
        let px = S::of(col as f64 + 0.5);
        let py = S::of(row as f64 + 0.5);

        // T_j before each contribution, plus the final transmittance.
        transmittances.clear();
        let mut t = S::one();
        for &(_, sigma) in rec {
            transmittances.push(t);
            t *= S::one() - sigma;
        }
        let t_end = t;

        let g_bg = g[0] * ctx.background[0] + g[1] * ctx.background[1] + g[2] * ctx.background[2];
        // suffix = sum over later contributions of sigma_k T_k (g . c_k),
        // plus the background term; both are scaled by T_k, which carries
        // the 1/(1 - sigma_j) factor in the chain rule.
        let mut suffix = t_end * g_bg;
        for j in (0..rec.len()).rev() {
            let (si, sigma) = (rec[j].0 as usize, rec[j].1);
            let splat = &ctx.splats[si];
            let t_j = transmittances[j];
            let g_dot_c = g[0] * splat.color[0] + g[1] * splat.color[1] + g[2] * splat.color[2];
            let weight = sigma * t_j;
            let slot = &mut acc[si];
            for ch in 0..3 {
                slot.color[ch] += g[ch] * weight;
            }
            let d_sigma = t_j * g_dot_c - suffix / (S::one() - sigma);
            suffix += weight * g_dot_c;
            if sigma >= sigma_max {
                continue; // saturated: clamp has zero derivative
            }
            // sigma = opacity * exp(-q/2), q = Delta^T A Delta
            slot.opacity += d_sigma * sigma / splat.opacity;
            let delta = Vector2::new(px - splat.mean2d.x, py - splat.mean2d.y);
            let ad = splat.inv_cov * delta;
            let coeff = d_sigma * sigma;
            slot.mean2d += ad * coeff;
            slot.cov2d += (ad * ad.transpose()) * (coeff * half);
        }
    }

    // Screen-space gradients back to primitive parameters.
    let w2c = ctx.rotation.transpose();
    let mut grads: Vec<GaussianGrad<S>> = vec![GaussianGrad::default(); ctx.n_primitives];
    for (splat, sg) in ctx.splats.iter().zip(&acc) {
        let out = &mut grads[splat.source];
        backprop_splat(splat, sg, &w2c, &ctx.rotation, ctx.fx, ctx.fy, out)?;
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backprop_splat<S: Real>(
    splat: &SplatCtx<S>,
    sg: &SplatGrad<S>,
    w2c: &Matrix3<S>,
    rotation: &Matrix3<S>,
    fx: S,
    fy: S,
    out: &mut GaussianGrad<S>,
) -> Result<()> {
    for ch in 0..3 {
        out.color[ch] += sg.color[ch];
    }
    out.opacity += sg.opacity;

    let q = splat.q;
    let j = projection_jacobian(fx, fy, &q);
    // mean2d = pinhole(q): d_q += J^T d_mean2d
    let mut d_q = j.transpose() * sg.mean2d;

    // cov2d = J M J^T + reg I with M = W Sigma W^T
    let (rot_q, drot) = quat_to_rotation_grad(splat.quat)?;
    let d = Matrix3::from_diagonal(&Vector3::new(
        splat.scale.x * splat.scale.x,
        splat.scale.y * splat.scale.y,
        splat.scale.z * splat.scale.z,
    ));
    let sigma_world = rot_q * d * rot_q.transpose();
    let m = w2c * sigma_world * w2c.transpose();
    let d_m: Matrix3<S> = j.transpose() * sg.cov2d * j;
    // dJ = 2 dC J M (dC, M symmetric)
    let d_j: SMatrix<S, 2, 3> = (sg.cov2d * j * m) * S::of(2.0);
    let zinv = S::one() / q.z;
    let zinv2 = zinv * zinv;
    d_q.x += d_j[(0, 2)] * (-fx * zinv2);
    d_q.y += d_j[(1, 2)] * (-fy * zinv2);
    d_q.z += d_j[(0, 0)] * (-fx * zinv2)
        + d_j[(1, 1)] * (-fy * zinv2)
        + d_j[(0, 2)] * (S::of(2.0) * fx * q.x * zinv2 * zinv)
        + d_j[(1, 2)] * (S::of(2.0) * fy * q.y * zinv2 * zinv);

    // q = W (mu - t): d_mu = R d_q
    out.mu += rotation * d_q;

    // Sigma_world = R_q D R_q^T, d_Sigma = W^T dM W
    let d_sigma = rotation * d_m * w2c;
    // dR_q = 2 dSigma R_q D; dD from the diagonal of R_q^T dSigma R_q
    let d_rot = (d_sigma * rot_q * d) * S::of(2.0);
    for i in 0..4 {
        let mut s = S::zero();
        for r in 0..3 {
            for c in 0..3 {
                s += d_rot[(r, c)] * drot[i][(r, c)];
            }
        }
        out.quat[i] += s;
    }
    let inner = rot_q.transpose() * d_sigma * rot_q;
    out.scale.x += S::of(2.0) * splat.scale.x * inner[(0, 0)];
    out.scale.y += S::of(2.0) * splat.scale.y * inner[(1, 1)];
    out.scale.z += S::of(2.0) * splat.scale.z * inner[(2, 2)];
    Ok(())
}
