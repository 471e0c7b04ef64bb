//! Perspective projection of 3D Gaussians to screen space.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};

use super::{ProjectedGaussian, RenderConfig};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gaussian::{covariance, GaussianCloud};
use crate::real::Real;

pub(crate) struct CameraS<S> {
    pub rotation: Matrix3<S>,
    pub translation: Vector3<S>,
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
}

impl<S: Real> CameraS<S> {
    pub fn from_pose(pose: &CameraPose) -> Self {
        CameraS {
            rotation: pose.rotation.map(S::of),
            translation: pose.translation.map(S::of),
            fx: S::of(pose.fx),
            fy: S::of(pose.fy),
            cx: S::of(pose.cx),
            cy: S::of(pose.cy),
        }
    }
}

/// Jacobian of the pinhole projection at camera-space point q.
pub(crate) fn projection_jacobian<S: Real>(fx: S, fy: S, q: &Vector3<S>) -> SMatrix<S, 2, 3> {
    let zinv = S::one() / q.z;
    let zinv2 = zinv * zinv;
    SMatrix::<S, 2, 3>::new(
        fx * zinv,
        S::zero(),
        -fx * q.x * zinv2,
        S::zero(),
        fy * zinv,
        -fy * q.y * zinv2,
    )
}

/// 2D covariance from the affine approximation: J W Sigma Wᵀ Jᵀ + reg I,
/// with J W folded into one 2x3 matrix.
pub(crate) fn flatten_cov<S: Real>(jw: &SMatrix<S, 2, 3>, sigma: &Matrix3<S>, reg: S) -> Matrix2<S> {
    let mut c = jw * sigma * jw.transpose();
    c[(0, 0)] += reg;
    c[(1, 1)] += reg;
    c
}

/// Project every primitive; entries outside the depth cull range are
/// dropped (silently, but counted by the caller via the returned total).
pub fn project<S: Real>(
    cloud: &GaussianCloud<S>,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<Vec<ProjectedGaussian<S>>> {
    pose.validate()?;
    cfg.validate()?;
    let cam = CameraS::<S>::from_pose(pose);
    let w2c = cam.rotation.transpose();
    let near = S::of(cfg.near_cull);
    let far = S::of(cfg.far_cull);
    let reg = S::of(cfg.cov_regularization);
    let mut out = Vec::with_capacity(cloud.len());
    for (i, prim) in cloud.primitives.iter().enumerate() {
        check_finite(prim, i)?;
        let q = w2c * (prim.mu - cam.translation);
        if q.z < near || q.z > far {
            continue;
        }
        let mean2d = Vector2::new(cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy);
        let sigma = covariance(prim.quat, prim.scale)?;
        let jw = projection_jacobian(cam.fx, cam.fy, &q) * w2c;
        let cov2d = flatten_cov(&jw, &sigma, reg);
        out.push(ProjectedGaussian { mean2d, cov2d, view_depth: q.z, source_index: i });
    }
    Ok(out)
}

pub(crate) fn check_finite<S: Real>(
    prim: &crate::gaussian::GaussianPrimitive<S>,
    index: usize,
) -> Result<()> {
    let finite = prim.mu.iter().all(|v| v.is_finite())
        && prim.quat.iter().all(|v| v.is_finite())
        && prim.scale.iter().all(|v| v.is_finite())
        && prim.opacity.is_finite()
        && prim.color.iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite primitive at index {index}")))
    }
}
