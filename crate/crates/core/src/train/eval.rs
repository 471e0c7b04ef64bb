//! Evaluation: PSNR / SSIM metrics and held-out-asset evaluation through
//! the full reverse-diffusion sampler.

use serde::Serialize;

use crate::camera::{generate_rays, rppc_embed, ViewAngles};
use crate::data::{dataset_render_config, select_views, SyntheticAsset};
use crate::denoiser::{forward, DenoiserConfig, ParamStore, ViewInput};
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::raster::render;
use crate::real::Real;

pub const PSNR_CAP_DB: f64 = 60.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01 * L)^2, L = 1
const SSIM_C2: f64 = 9e-4; // (0.03 * L)^2

/// PSNR of two [0,1] images: 10 log10(1 / MSE), capped at 60 dB.
pub fn psnr<S: Real>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!("psnr: {} vs {} values", a.len(), b.len())));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|k| {
            let dy = (k / SSIM_WINDOW) as f64 - half;
            let dx = (k % SSIM_WINDOW) as f64 - half;
            (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM over all full 11x11 Gaussian windows and the 3 channels.
pub fn ssim<S: Real>(a: &[S], b: &[S], height: usize, width: usize) -> Result<f64> {
    let n = height * width * 3;
    if a.len() != n || b.len() != n {
        return Err(Error::contract(format!("ssim: got {} / {} values, expected {n}", a.len(), b.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: image {width}x{height} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let at = |img: &[S], y: usize, x: usize, c: usize| img[(y * width + x) * 3 + c].to_f64();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=height - SSIM_WINDOW {
            for x0 in 0..=width - SSIM_WINDOW {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let w = win[wy * SSIM_WINDOW + wx];
                        let xv = at(a, y0 + wy, x0 + wx, c);
                        let yv = at(b, y0 + wy, x0 + wx, c);
                        mx += w * xv;
                        my += w * yv;
                        mxx += w * xv * xv;
                        myy += w * yv * yv;
                        mxy += w * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct AssetMetrics {
    pub id: String,
    /// Novel poses, sampled cloud rendered vs ground truth.
    pub psnr_novel: f64,
    pub ssim_novel: f64,
    /// Final denoised views at the noisy (supervised) poses.
    pub psnr_supervised: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_asset: Vec<AssetMetrics>,
    pub mean_psnr_novel: f64,
    pub mean_ssim_novel: f64,
    pub mean_psnr_supervised: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_noisy: usize,
    pub m_novel: usize,
    pub angles: ViewAngles,
    pub sampler: SamplerConfig,
    /// View-selection seed (mixed per asset index).
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_noisy: 3,
            m_novel: 4,
            angles: ViewAngles::default(),
            sampler: SamplerConfig { num_steps: 10, eta: 0.0, seed: 0 },
            seed: 0,
        }
    }
}

/// Run the reverse-diffusion sampler per asset and score the results.
pub fn evaluate(
    config: &DenoiserConfig,
    params: &ParamStore<f32>,
    assets: &[SyntheticAsset],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if assets.is_empty() {
        return Err(Error::contract("evaluate: no assets"));
    }
    let schedule = NoiseSchedule::default();
    let render_cfg = dataset_render_config();
    let mut per_asset = Vec::with_capacity(assets.len());
    for (ai, asset) in assets.iter().enumerate() {
        let views = select_views(
            asset,
            opts.n_noisy,
            opts.m_novel,
            &opts.angles,
            opts.seed.wrapping_add(ai as u64),
        )?;
        let cond_pose = &asset.poses[views.condition];
        let cond_grid = generate_rays(cond_pose)?;
        let cond_embed = rppc_embed(&cond_grid);
        let cond_image = asset.image_as::<f32>(views.condition);
        let noisy_poses: Vec<_> = views.noisy.iter().map(|&i| asset.poses[i].clone()).collect();
        let noisy_grids: Vec<_> =
            noisy_poses.iter().map(generate_rays).collect::<Result<Vec<_>>>()?;
        let noisy_embeds: Vec<_> = noisy_grids.iter().map(rppc_embed).collect();

        let result = sample::<f32, _>(
            &schedule,
            &opts.sampler,
            &noisy_poses,
            &render_cfg,
            |noisy_images, t| {
                let cond = ViewInput {
                    image: &cond_image,
                    embedding: &cond_embed,
                    grid: &cond_grid,
                };
                let noisy_inputs: Vec<ViewInput<f32>> = noisy_images
                    .iter()
                    .enumerate()
                    .map(|(i, img)| ViewInput {
                        image: img,
                        embedding: &noisy_embeds[i],
                        grid: &noisy_grids[i],
                    })
                    .collect();
                Ok(forward(config, params, &cond, &noisy_inputs, t, asset.profile)?.cloud)
            },
        )?;

        let mut psnr_nv = 0.0;
        let mut ssim_nv = 0.0;
        for &ni in &views.novel {
            let out = render(&result.cloud, &asset.poses[ni], &render_cfg)?;
            let gt = asset.image_as::<f32>(ni);
            psnr_nv += psnr(&out.image, &gt)? / views.novel.len() as f64;
            ssim_nv += ssim(&out.image, &gt, out.height, out.width)? / views.novel.len() as f64;
        }
        let mut psnr_sup = 0.0;
        for (k, &ni) in views.noisy.iter().enumerate() {
            let gt = asset.image_as::<f32>(ni);
            psnr_sup += psnr(&result.denoised_views[k], &gt)? / views.noisy.len() as f64;
        }
        per_asset.push(AssetMetrics {
            id: asset.id.clone(),
            psnr_novel: psnr_nv,
            ssim_novel: ssim_nv,
            psnr_supervised: psnr_sup,
        });
    }
    let n = per_asset.len() as f64;
    Ok(MetricsReport {
        mean_psnr_novel: per_asset.iter().map(|m| m.psnr_novel).sum::<f64>() / n,
        mean_ssim_novel: per_asset.iter().map(|m| m.ssim_novel).sum::<f64>() / n,
        mean_psnr_supervised: per_asset.iter().map(|m| m.psnr_supervised).sum::<f64>() / n,
        per_asset,
    })
}
