//! Training: losses, the optimization loop with the published schedule
//! constants, evaluation metrics, and checkpointing.

mod checkpoint;
mod eval;
mod losses;
mod optim;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use eval::{evaluate, psnr, ssim, AssetMetrics, EvalOptions, MetricsReport};
pub use losses::{
    image_loss, loss_denoise, loss_point_distribution, total_loss, LossGate,
};
pub use optim::Adam;
pub use run::{StepStats, TrainData, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which asset stream(s) the loop draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Mixed,
    FinetuneObject,
    FinetuneScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warm-up.
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    /// Weight of the image-gradient perceptual proxy.
    pub lambda: f64,
    /// Warm-up boundary for the loss gating: iterations <= iter_0 apply
    /// only the point-distribution loss, and only to object batches.
    pub iter_0: usize,
    /// Spread target of the point-distribution loss.
    pub sigma_0: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of drawing a batch item from the object stream.
    pub object_fraction: f64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Noisy views per item.
    pub n_noisy: usize,
    /// Novel supervision views per item.
    pub m_novel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 4e-4,
            warmup_iters: 2000,
            total_iters: 10_000,
            lambda: 0.5,
            iter_0: 500,
            sigma_0: 0.5,
            batch_size: 2,
            seed: 0,
            object_fraction: 0.5,
            mode: TrainMode::Mixed,
            checkpoint_every: 0,
            n_noisy: 3,
            m_novel: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(Error::contract(format!(
                "warmup_iters {} must be < total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::contract(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.sigma_0 <= 0.0 {
            return Err(Error::contract(format!("sigma_0 {} must be > 0", self.sigma_0)));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::contract(format!("lr_peak {} must be > 0", self.lr_peak)));
        }
        if self.batch_size == 0 || self.n_noisy == 0 || self.m_novel == 0 {
            return Err(Error::contract("batch_size, n_noisy and m_novel must be positive"));
        }
        if !(0.0..=1.0).contains(&self.object_fraction) {
            return Err(Error::contract(format!(
                "object_fraction {} outside [0,1]",
                self.object_fraction
            )));
        }
        Ok(())
    }

    /// Stream mixing fraction after applying the mode override.
    pub fn effective_object_fraction(&self) -> f64 {
        match self.mode {
            TrainMode::Mixed => self.object_fraction,
            TrainMode::FinetuneObject => 1.0,
            TrainMode::FinetuneScene => 0.0,
        }
    }

    /// Closed-form schedule: linear 0 -> lr_peak over the warm-up, then
    /// cosine decay to 0 at total_iters.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter <= self.warmup_iters {
            if self.warmup_iters == 0 {
                // no warm-up: cosine from iteration 0
                return self.lr_peak * 0.5
                    * (1.0 + (std::f64::consts::PI * iter as f64 / self.total_iters as f64).cos());
            }
            return self.lr_peak * iter as f64 / self.warmup_iters as f64;
        }
        let span = (self.total_iters - self.warmup_iters) as f64;
        let x = (iter.min(self.total_iters) - self.warmup_iters) as f64 / span;
        self.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}
