//! Adam with bias correction, moments stored per parameter tensor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Completed update count (bias-correction exponent).
    pub step: usize,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    /// One update over all parameters; `grads` parallel to `params`.
    pub fn update(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} params / {} grads for {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (BETA1 as f32).powi(t);
        let c2 = 1.0 - (BETA2 as f32).powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let (lr, eps) = (lr as f32, EPS as f32);
        for i in 0..self.m.len() {
            if params[i].shape() != grads[i].shape() {
                return Err(Error::contract(format!("adam: shape mismatch at parameter {i}")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
