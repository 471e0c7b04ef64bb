//! Command-line surface: dataset generation, training, sampling,
//! rendering, evaluation, and PLY export.
//!
//! Exit codes: 0 success, 1 contract/usage errors, 2 I/O errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diffsplat_core::camera::{generate_rays, rppc_embed, CameraPose, PoseRecord, ViewAngles};
use diffsplat_core::data::{
    dataset_render_config, gen_object, gen_scene, load_asset, quantize_image, read_manifest,
    select_views, write_dataset, write_png, SyntheticAsset,
};
use diffsplat_core::denoiser::{forward, DenoiserConfig, ProfileTag, ViewInput};
use diffsplat_core::diffusion::{sample, NoiseSchedule, SamplerConfig};
use diffsplat_core::gaussian::{export_ply, import_ply};
use diffsplat_core::raster::{render, RenderConfig};
use diffsplat_core::train::{
    evaluate, load_checkpoint, save_checkpoint, EvalOptions, TrainConfig, TrainData, Trainer,
};
use diffsplat_core::{Error, Result};

/// All tunables in one JSON document; every section and field is optional
/// and falls back to the documented defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct Config {
    train: TrainConfig,
    denoiser: DenoiserConfig,
    render: RenderConfig,
    sampler: SamplerConfig,
    angles: ViewAngles,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p.display().to_string(), e.to_string()))
        }
    }
}

#[derive(Parser)]
#[command(
    name = "diffsplat",
    version,
    about = "Single-stage 3D Gaussian diffusion: data generation, training, sampling, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write its manifest.
    GenData {
        #[arg(long, default_value_t = 8)]
        objects: usize,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        /// Dataset root directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; asset k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a denoiser on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Path to the dataset manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write (and periodically refresh).
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many iterations (default: run to total_iters).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run the reverse-diffusion sampler for one asset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        asset_index: usize,
        /// Output directory for the cloud and denoised views.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a PLY Gaussian cloud from a stored camera pose.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        /// Pose record JSON.
        #[arg(long)]
        pose: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; emits a JSON metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a dataset asset's ground-truth cloud as PLY.
    ExportPly {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        asset_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_assets(manifest_path: &Path) -> Result<(Vec<SyntheticAsset>, Vec<SyntheticAsset>, ViewAngles)> {
    let manifest = read_manifest(manifest_path)?;
    let mut objects = Vec::new();
    let mut scenes = Vec::new();
    for record in &manifest.assets {
        let asset = load_asset(manifest_path, record)?;
        match asset.profile {
            ProfileTag::Object => objects.push(asset),
            ProfileTag::Scene => scenes.push(asset),
        }
    }
    Ok((objects, scenes, manifest.angles))
}

fn asset_by_index(manifest_path: &Path, index: usize) -> Result<SyntheticAsset> {
    let manifest = read_manifest(manifest_path)?;
    let record = manifest.assets.get(index).ok_or_else(|| {
        Error::contract(format!(
            "asset index {index} out of range ({} assets in manifest)",
            manifest.assets.len()
        ))
    })?;
    load_asset(manifest_path, record)
}

fn cmd_gen_data(
    objects: usize,
    scenes: usize,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
) -> Result<()> {
    if objects + scenes == 0 {
        return Err(Error::contract("nothing to generate: --objects and --scenes are both 0"));
    }
    let cfg = load_config(config)?;
    let mut assets = Vec::new();
    for k in 0..objects {
        assets.push(gen_object(seed + k as u64)?);
    }
    for k in 0..scenes {
        assets.push(gen_scene(seed + (objects + k) as u64)?);
    }
    let manifest = write_dataset(out, &assets, &cfg.angles)?;
    println!("wrote {} assets, manifest {}", assets.len(), manifest.display());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    iters: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (objects, scenes, angles) = load_assets(data)?;
    let mut trainer = match resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            Trainer::new(train_cfg, cfg.denoiser.clone())?
        }
    };
    let train_data = TrainData { objects: &objects, scenes: &scenes, angles };
    let remaining = trainer.train_cfg.total_iters.saturating_sub(trainer.iter);
    let todo = iters.unwrap_or(remaining).min(remaining);
    let report_every = (todo / 20).max(1);
    let mut done = 0;
    while done < todo {
        let chunk = report_every.min(todo - done);
        let stats = trainer.run(&train_data, chunk, Some(out))?;
        if let Some(last) = stats.last() {
            println!(
                "iter {:>6}  loss {:.6}  lr {:.2e}  items {}",
                last.iter, last.loss, last.lr, last.contributing_items
            );
        }
        done += chunk;
    }
    save_checkpoint(out, &trainer)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_sample(
    checkpoint: &Path,
    data: &Path,
    asset_index: usize,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let trainer = load_checkpoint(checkpoint)?;
    let asset = asset_by_index(data, asset_index)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let views = select_views(
        &asset,
        trainer.model_cfg.n_noisy,
        trainer.train_cfg.m_novel,
        &cfg.angles,
        sampler.seed,
    )?;
    let cond_pose = &asset.poses[views.condition];
    let cond_grid = generate_rays(cond_pose)?;
    let cond_embed = rppc_embed(&cond_grid);
    let cond_image = asset.image_as::<f32>(views.condition);
    let noisy_poses: Vec<CameraPose> =
        views.noisy.iter().map(|&i| asset.poses[i].clone()).collect();
    let noisy_grids = noisy_poses.iter().map(generate_rays).collect::<Result<Vec<_>>>()?;
    let noisy_embeds: Vec<_> = noisy_grids.iter().map(rppc_embed).collect();

    let schedule = NoiseSchedule::default();
    let result = sample::<f32, _>(&schedule, &sampler, &noisy_poses, &cfg.render, |imgs, t| {
        let cond = ViewInput { image: &cond_image, embedding: &cond_embed, grid: &cond_grid };
        let noisy: Vec<ViewInput<f32>> = imgs
            .iter()
            .enumerate()
            .map(|(i, img)| ViewInput {
                image: img,
                embedding: &noisy_embeds[i],
                grid: &noisy_grids[i],
            })
            .collect();
        Ok(forward(&trainer.model_cfg, &trainer.params, &cond, &noisy, t, asset.profile)?.cloud)
    })?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    export_ply(&result.cloud, &out.join("cloud.ply"))?;
    for (k, view) in result.denoised_views.iter().enumerate() {
        let bytes = quantize_image(view);
        write_png(&out.join(format!("view_{k:03}.png")), cond_pose.width, cond_pose.height, &bytes)?;
    }
    println!(
        "sampled {} ({} denoiser calls), outputs in {}",
        asset.id, result.denoiser_calls, out.display()
    );
    Ok(())
}

fn cmd_render(cloud: &Path, pose: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(_) => load_config(config)?.render,
        None => dataset_render_config(),
    };
    let cloud = import_ply(cloud)?;
    let text =
        std::fs::read_to_string(pose).map_err(|e| Error::io(pose.display().to_string(), e))?;
    let record: PoseRecord = serde_json::from_str(&text)
        .map_err(|e| Error::format(pose.display().to_string(), e.to_string()))?;
    let pose = CameraPose::try_from(&record)?;
    let output = render(&cloud, &pose, &cfg)?;
    write_png(out, output.width, output.height, &quantize_image(&output.image))?;
    println!("rendered {}x{} to {}", output.width, output.height, out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let trainer = load_checkpoint(checkpoint)?;
    let (objects, scenes, angles) = load_assets(data)?;
    let assets: Vec<SyntheticAsset> = objects.into_iter().chain(scenes).collect();
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let opts = EvalOptions {
        n_noisy: trainer.model_cfg.n_noisy,
        m_novel: trainer.train_cfg.m_novel,
        angles,
        seed: sampler.seed,
        sampler,
    };
    let report = evaluate(&trainer.model_cfg, &trainer.params, &assets, &opts)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::contract(format!("report serialization failed: {e}")))?;
    match out {
        Some(p) => {
            std::fs::write(p, &json).map_err(|e| Error::io(p.display().to_string(), e))?;
            println!("metrics report written to {}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_export_ply(data: &Path, asset_index: usize, out: &Path) -> Result<()> {
    let asset = asset_by_index(data, asset_index)?;
    export_ply(&asset.cloud, out)?;
    println!("exported {} primitives from {} to {}", asset.cloud.len(), asset.id, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { objects, scenes, out, config, seed } => {
            cmd_gen_data(objects, scenes, &out, config.as_deref(), seed.unwrap_or(0))
        }
        Cmd::Train { config, data, out, resume, seed, iters } => {
            cmd_train(config.as_deref(), &data, &out, resume.as_deref(), seed, iters)
        }
        Cmd::Sample { checkpoint, data, asset_index, out, config, seed } => {
            cmd_sample(&checkpoint, &data, asset_index, &out, config.as_deref(), seed)
        }
        Cmd::Render { cloud, pose, out, config } => {
            cmd_render(&cloud, &pose, &out, config.as_deref())
        }
        Cmd::Eval { checkpoint, data, out, config, seed } => {
            cmd_eval(&checkpoint, &data, out.as_deref(), config.as_deref(), seed)
        }
        Cmd::ExportPly { data, asset_index, out } => cmd_export_ply(&data, asset_index, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Io { .. } | Error::Format { .. } => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
