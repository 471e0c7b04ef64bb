//! Shared fixtures for the criterion benches.

use diffsplat_core::camera::CameraPose;
use diffsplat_core::gaussian::{GaussianCloud, GaussianPrimitive};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random cloud of unit-quaternion Gaussians inside [-1,1]^3.
pub fn random_cloud(n: usize, seed: u64) -> GaussianCloud<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitives = (0..n)
        .map(|_| {
            let q = [
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (q.iter().map(|v| v * v).sum::<f32>()).sqrt().max(1e-6);
            GaussianPrimitive {
                mu: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                quat: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
                scale: Vector3::new(
                    rng.gen_range(0.02..0.15),
                    rng.gen_range(0.02..0.15),
                    rng.gen_range(0.02..0.15),
                ),
                opacity: rng.gen_range(0.2..0.9),
                color: [rng.gen(), rng.gen(), rng.gen()],
            }
        })
        .collect();
    GaussianCloud { primitives }
}

/// Camera on the +z axis looking at the origin.
pub fn orbit_pose(width: usize, height: usize) -> CameraPose {
    let eye = Vector3::new(0.0, 0.0, -4.0);
    let rot = CameraPose::look_at_rotation(eye, Vector3::zeros(), Vector3::y());
    CameraPose::from_fov_deg(rot, eye, 50.0, width, height).expect("valid pose")
}
