//! The optimization loop: batch assembly, forward noising, denoiser
//! forward, differentiable rendering, Eq. 13 loss gating, and Adam.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::{generate_rays, rppc_embed, CameraPose, RayEmbedding, RayGrid, ViewAngles};
use crate::data::{dataset_render_config, mixed_batch, SyntheticAsset};
use crate::denoiser::{forward, DenoiserConfig, ParamStore, ViewInput};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianGrad, GaussianParamMap};
use crate::raster::{render, render_backward};
use crate::tensor::Tensor;

use super::checkpoint::save_checkpoint;
use super::losses::{loss_denoise, loss_point_distribution, LossGate};
use super::optim::Adam;
use super::TrainConfig;

/// Asset streams the loop draws batches from.
pub struct TrainData<'a> {
    pub objects: &'a [SyntheticAsset],
    pub scenes: &'a [SyntheticAsset],
    pub angles: ViewAngles,
}

/// One iteration's outcome.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// 1-based iteration index just completed.
    pub iter: usize,
    /// Mean loss over contributing batch items (0 if all were skipped).
    pub loss: f64,
    pub lr: f64,
    pub contributing_items: usize,
    /// Contributing items per profile.
    pub object_items: usize,
    pub scene_items: usize,
    /// False when the whole batch was gated out (scene warm-up).
    pub updated: bool,
}

pub struct Trainer {
    pub train_cfg: TrainConfig,
    pub model_cfg: DenoiserConfig,
    pub params: ParamStore<f32>,
    pub opt: Adam,
    pub schedule: NoiseSchedule,
    /// Completed iterations.
    pub iter: usize,
}

/// Splitmix-style mixing so each iteration re-seeds its own RNG; resuming
/// from a checkpoint then reproduces the remaining trajectory bit-exactly
/// without serializing generator state.
fn iter_seed(seed: u64, iter: usize) -> u64 {
    let mut z = seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ViewData {
    pose: CameraPose,
    grid: RayGrid,
    embed: RayEmbedding,
    gt: Vec<f32>,
}

fn view_data(asset: &SyntheticAsset, index: usize) -> Result<ViewData> {
    let pose = asset.poses[index].clone();
    let grid = generate_rays(&pose)?;
    let embed = rppc_embed(&grid);
    Ok(ViewData { pose, grid, embed, gt: asset.image_as::<f32>(index) })
}

fn add_grad(a: &mut GaussianGrad<f32>, b: &GaussianGrad<f32>) {
    a.mu += b.mu;
    for i in 0..4 {
        a.quat[i] += b.quat[i];
    }
    a.scale += b.scale;
    a.opacity += b.opacity;
    for i in 0..3 {
        a.color[i] += b.color[i];
    }
}

impl Trainer {
    pub fn new(train_cfg: TrainConfig, model_cfg: DenoiserConfig) -> Result<Self> {
        train_cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.n_noisy != train_cfg.n_noisy {
            return Err(Error::contract(format!(
                "model expects {} noisy views, train config supplies {}",
                model_cfg.n_noisy, train_cfg.n_noisy
            )));
        }
        let params = model_cfg.init_params::<f32>(train_cfg.seed)?;
        let shapes: Vec<Vec<usize>> =
            params.entries().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Ok(Trainer {
            train_cfg,
            model_cfg,
            params,
            opt: Adam::new(&shapes),
            schedule: NoiseSchedule::default(),
            iter: 0,
        })
    }

    /// Rebuild from checkpointed pieces.
    pub fn from_parts(
        train_cfg: TrainConfig,
        model_cfg: DenoiserConfig,
        params: ParamStore<f32>,
        opt: Adam,
        iter: usize,
    ) -> Result<Self> {
        train_cfg.validate()?;
        model_cfg.validate()?;
        Ok(Trainer { train_cfg, model_cfg, params, opt, schedule: NoiseSchedule::default(), iter })
    }

    /// One training iteration. Returns stats; errors abort the run with
    /// the iteration in the message (non-finite loss, render failure, ...).
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats> {
        let iter = self.iter + 1;
        self.step_inner(data, iter).map_err(|e| match e {
            Error::Io { .. } | Error::Format { .. } => e,
            other => Error::InvalidInput(format!("aborted at iteration {iter}: {other}")),
        })
    }

    fn step_inner(&mut self, data: &TrainData, iter: usize) -> Result<StepStats> {
        let cfg = &self.train_cfg;
        if iter > cfg.total_iters {
            return Err(Error::contract(format!(
                "iteration {iter} past total_iters {}",
                cfg.total_iters
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed(cfg.seed, iter));
        let items = mixed_batch(
            data.objects,
            data.scenes,
            cfg.effective_object_fraction(),
            cfg.n_noisy,
            cfg.m_novel,
            &data.angles,
            cfg.batch_size,
            &mut rng,
        )?;
        let render_cfg = dataset_render_config();
        let t_max = self.schedule.t_max();
        let (h, w) = (self.model_cfg.image_height, self.model_cfg.image_width);
        let n_px = h * w;
        let n_views = self.model_cfg.n_views();

        let mut grad_acc: Vec<Tensor<f32>> = self
            .params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut total = 0.0f64;
        let mut contributing = 0usize;
        let mut object_items = 0usize;
        let mut scene_items = 0usize;

        for item in &items {
            let gate = LossGate::at(iter, cfg.iter_0, item.profile);
            // draw the item's randomness unconditionally so the stream
            // stays aligned whether or not the item is gated out
            let t = rng.gen_range(1..=t_max);
            if gate == LossGate::Skip {
                continue;
            }
            let asset = match item.profile {
                crate::denoiser::ProfileTag::Object => &data.objects[item.asset_index],
                crate::denoiser::ProfileTag::Scene => &data.scenes[item.asset_index],
            };
            let cond = view_data(asset, item.views.condition)?;
            let noisy: Vec<ViewData> = item
                .views
                .noisy
                .iter()
                .map(|&i| view_data(asset, i))
                .collect::<Result<Vec<_>>>()?;
            let noisy_images: Vec<Vec<f32>> = noisy
                .iter()
                .map(|v| {
                    let eps: Vec<f32> = (0..n_px * 3)
                        .map(|_| {
                            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                                as f32
                        })
                        .collect();
                    q_sample(&v.gt, t, &eps, &self.schedule)
                })
                .collect::<Result<Vec<_>>>()?;

            let cond_input =
                ViewInput { image: &cond.gt, embedding: &cond.embed, grid: &cond.grid };
            let noisy_inputs: Vec<ViewInput<f32>> = noisy
                .iter()
                .zip(&noisy_images)
                .map(|(v, img)| ViewInput { image: img, embedding: &v.embed, grid: &v.grid })
                .collect();
            let pass = forward(
                &self.model_cfg,
                &self.params,
                &cond_input,
                &noisy_inputs,
                t,
                item.profile,
            )?;

            let (loss_val, grad_maps): (f64, Vec<GaussianParamMap<f32>>) = match gate {
                LossGate::PointDistribution => {
                    let mut distances = Vec::with_capacity(n_views * n_px);
                    let mut origins = Vec::with_capacity(n_views * n_px);
                    let grids: Vec<&RayGrid> = std::iter::once(&cond.grid)
                        .chain(noisy.iter().map(|v| &v.grid))
                        .collect();
                    for (rec, grid) in pass.records.iter().zip(&grids) {
                        distances.extend(rec.distances());
                        origins.extend(grid.rays().iter().map(|r| r.origin.norm() as f32));
                    }
                    let (l_pd, du) = loss_point_distribution(&distances, &origins, cfg.sigma_0)?;
                    let zero = vec![GaussianGrad::<f32>::default(); n_px];
                    let maps = pass
                        .records
                        .iter()
                        .enumerate()
                        .map(|(v, rec)| {
                            rec.backward(&zero, Some(&du[v * n_px..(v + 1) * n_px]))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (l_pd as f64, maps)
                }
                LossGate::Image => {
                    let mut cloud_grads = vec![GaussianGrad::<f32>::default(); pass.cloud.len()];
                    let mut backprop = |poses_gt: &[(&CameraPose, &[f32])]| -> Result<f64> {
                        let mut rendered = Vec::with_capacity(poses_gt.len());
                        let mut outputs = Vec::with_capacity(poses_gt.len());
                        for (pose, _) in poses_gt {
                            let out = render(&pass.cloud, pose, &render_cfg)?;
                            rendered.push(out.image.clone());
                            outputs.push(out);
                        }
                        let gts: Vec<Vec<f32>> =
                            poses_gt.iter().map(|(_, g)| g.to_vec()).collect();
                        let (value, grads) = loss_denoise(&rendered, &gts, h, w, cfg.lambda)?;
                        for (out, g) in outputs.iter().zip(&grads) {
                            for (k, sg) in render_backward(out, g)?.iter().enumerate() {
                                add_grad(&mut cloud_grads[k], sg);
                            }
                        }
                        Ok(value as f64)
                    };
                    let denoise_pairs: Vec<(&CameraPose, &[f32])> =
                        noisy.iter().map(|v| (&v.pose, v.gt.as_slice())).collect();
                    let l_de = backprop(&denoise_pairs)?;
                    let novel: Vec<ViewData> = item
                        .views
                        .novel
                        .iter()
                        .map(|&i| view_data(asset, i))
                        .collect::<Result<Vec<_>>>()?;
                    let novel_pairs: Vec<(&CameraPose, &[f32])> =
                        novel.iter().map(|v| (&v.pose, v.gt.as_slice())).collect();
                    let l_nv = backprop(&novel_pairs)?;
                    let maps = pass
                        .records
                        .iter()
                        .enumerate()
                        .map(|(v, rec)| {
                            rec.backward(&cloud_grads[v * n_px..(v + 1) * n_px], None)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (l_de + l_nv, maps)
                }
                LossGate::Skip => unreachable!(),
            };

            if !loss_val.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite loss {loss_val} (asset {}, t {t})",
                    asset.id
                )));
            }
            let seed = pass.seed_from_maps(&grad_maps)?;
            let mut grads = pass.backward(&seed)?;
            for (i, id) in pass.param_ids.iter().enumerate() {
                let g = grads.take(*id);
                let acc = grad_acc[i].data_mut();
                for (a, &b) in acc.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            total += loss_val;
            contributing += 1;
            match item.profile {
                crate::denoiser::ProfileTag::Object => object_items += 1,
                crate::denoiser::ProfileTag::Scene => scene_items += 1,
            }
        }

        let lr = cfg.lr_at(iter);
        let updated = contributing > 0;
        if updated {
            let inv = 1.0 / contributing as f32;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let mut tensors: Vec<&mut Tensor<f32>> = self.params.tensors_mut();
            self.opt.update(&mut tensors, &grad_acc, lr)?;
        }
        self.iter = iter;
        Ok(StepStats {
            iter,
            loss: if updated { total / contributing as f64 } else { 0.0 },
            lr,
            contributing_items: contributing,
            object_items,
            scene_items,
            updated,
        })
    }

    /// Run up to `iters` further iterations (clamped at total_iters),
    /// checkpointing per config. On error the last written checkpoint
    /// remains on disk as the last-good state.
    pub fn run(
        &mut self,
        data: &TrainData,
        iters: usize,
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<StepStats>> {
        let end = (self.iter + iters).min(self.train_cfg.total_iters);
        let mut stats = Vec::with_capacity(end.saturating_sub(self.iter));
        while self.iter < end {
            let s = self.step(data)?;
            let every = self.train_cfg.checkpoint_every;
            if let Some(path) = checkpoint_path {
                if every > 0 && (s.iter % every == 0 || s.iter == end) {
                    save_checkpoint(path, self)?;
                }
            }
            stats.push(s);
        }
        Ok(stats)
    }
}
