//! Noise schedule, forward noising, x0-prediction updates, and
//! DDIM-style accelerated sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::raster::{render, RenderConfig};
use crate::real::Real;

pub const DEFAULT_T: usize = 1000;
const ALPHA_BAR_MIN: f64 = 1e-5;
const ALPHA_BAR_MAX: f64 = 1.0 - 1e-5;
const COSINE_OFFSET: f64 = 0.008;

/// Table of cumulative signal fractions, indexed by timestep 0..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule rescaled into [1e-5, 1 - 1e-5] so the table stays
    /// strictly decreasing (a hard clamp would flatten the tail into ties).
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::contract(format!("schedule needs T >= 2, got {t_max}")));
        }
        let f = |t: f64| {
            let arg = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_bar = (0..=t_max)
            .map(|t| ALPHA_BAR_MIN + (ALPHA_BAR_MAX - ALPHA_BAR_MIN) * f(t as f64) / f0)
            .collect();
        let s = NoiseSchedule { alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let t_max = self.t_max();
        if self.alpha_bar[0] < 1.0 - 1e-4 {
            return Err(Error::contract(format!(
                "alpha_bar[0] = {} below 1 - 1e-4",
                self.alpha_bar[0]
            )));
        }
        if self.alpha_bar[t_max] > 1e-3 {
            return Err(Error::contract(format!(
                "alpha_bar[T] = {} above 1e-3",
                self.alpha_bar[t_max]
            )));
        }
        for t in 1..=t_max {
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(Error::contract(format!("alpha_bar not strictly decreasing at t = {t}")));
            }
            if !(self.alpha_bar[t] > 0.0 && self.alpha_bar[t] < 1.0) {
                return Err(Error::contract(format!("alpha_bar[{t}] outside (0,1)")));
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} > T = {}", self.t_max())))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine(DEFAULT_T).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Stochasticity in [0, 1]; 0 is deterministic DDIM.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 10, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps < 1 || self.num_steps > schedule.t_max() {
            return Err(Error::contract(format!(
                "num_steps must be in [1, {}], got {}",
                schedule.t_max(),
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::contract(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per element.
pub fn q_sample<S: Real>(
    x0: &[S],
    t: usize,
    eps: &[S],
    schedule: &NoiseSchedule,
) -> Result<Vec<S>> {
    if x0.len() != eps.len() {
        return Err(Error::contract(format!(
            "q_sample: x0 length {} != eps length {}",
            x0.len(),
            eps.len()
        )));
    }
    let abar = schedule.alpha_bar(t)?;
    let a = S::of(abar.sqrt());
    let b = S::of((1.0 - abar).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// x_{t_prev} = sqrt(abar_{t_prev}) x0_hat + sqrt(1 - abar_{t_prev}) eps.
pub fn ancestral_update<S: Real>(
    x0_hat: &[S],
    t: usize,
    t_prev: usize,
    eps: &[S],
    schedule: &NoiseSchedule,
) -> Result<Vec<S>> {
    if t_prev >= t {
        return Err(Error::contract(format!(
            "ancestral_update: t_prev {t_prev} must be < t {t}"
        )));
    }
    schedule.alpha_bar(t)?;
    q_sample(x0_hat, t_prev, eps, schedule)
}

/// Uniformly spaced timesteps T = t_0 > t_1 > ... > t_k = 0.
pub fn timestep_schedule(schedule: &NoiseSchedule, num_steps: usize) -> Vec<usize> {
    let t_max = schedule.t_max();
    let k = num_steps;
    let mut ts: Vec<usize> = (0..=k)
        .map(|i| ((t_max as f64) * (k - i) as f64 / k as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Output of the reverse-diffusion loop.
pub struct SampleResult<S> {
    /// Gaussian cloud from the final (t -> 0) denoiser call.
    pub cloud: GaussianCloud<S>,
    /// Final clean renders at the noisy-view poses, H x W x 3 each.
    pub denoised_views: Vec<Vec<S>>,
    /// Number of denoiser invocations made.
    pub denoiser_calls: usize,
}

/// Reverse diffusion: start from standard-normal noisy views at t = T,
/// repeatedly predict a Gaussian cloud from the current noisy views,
/// render the clean estimate at the noisy poses, and re-noise to the next
/// (lower) timestep. The denoiser is supplied as a closure from the
/// current noisy view images and timestep to a cloud.
pub fn sample<S: Real, F>(
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    noisy_poses: &[CameraPose],
    render_cfg: &RenderConfig,
    mut denoise: F,
) -> Result<SampleResult<S>>
where
    F: FnMut(&[Vec<S>], usize) -> Result<GaussianCloud<S>>,
{
    cfg.validate(schedule)?;
    if noisy_poses.is_empty() {
        return Err(Error::contract("sample: no noisy-view poses"));
    }
    let n_px = noisy_poses[0].width * noisy_poses[0].height * 3;
    for p in noisy_poses {
        if p.width * p.height * 3 != n_px {
            return Err(Error::contract("sample: noisy poses disagree on resolution"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<S> {
        (0..n_px)
            .map(|_| S::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale))
            .collect()
    };
    let mut noisy: Vec<Vec<S>> = (0..noisy_poses.len()).map(|_| draw(&mut rng, 1.0)).collect();

    let ts = timestep_schedule(schedule, cfg.num_steps);
    let mut cloud = None;
    let mut denoised = Vec::new();
    let mut calls = 0usize;
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let predicted = denoise(&noisy, t)?;
        calls += 1;
        denoised.clear();
        for pose in noisy_poses {
            let mut out = render(&predicted, pose, render_cfg)?;
            out.drop_records();
            denoised.push(out.image);
        }
        if t_prev > 0 {
            for (view, x0_hat) in noisy.iter_mut().zip(&denoised) {
                let eps = if cfg.eta > 0.0 { draw(&mut rng, cfg.eta) } else { vec![S::zero(); n_px] };
                *view = ancestral_update(x0_hat, t, t_prev, &eps, schedule)?;
            }
        }
        cloud = Some(predicted);
    }
    Ok(SampleResult {
        cloud: cloud.expect("at least one step"),
        denoised_views: denoised,
        denoiser_calls: calls,
    })
}
