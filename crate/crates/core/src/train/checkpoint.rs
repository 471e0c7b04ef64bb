//! Checkpoint file: "DSCK" magic, JSON metadata header, then the named
//! tensor blob holding the parameters and Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_blob_from, write_tensor_blob_to, Tensor};

use super::run::Trainer;
use super::optim::Adam;
use super::TrainConfig;

const MAGIC: &[u8; 4] = b"DSCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub iter: usize,
    pub adam_step: usize,
    pub config_hash: u64,
}

/// FNV-1a over the serialized configs; detects a resume against a
/// mismatched config file.
fn config_hash(denoiser: &DenoiserConfig, train: &TrainConfig) -> Result<u64> {
    let bytes = serde_json::to_vec(&(denoiser, train))
        .map_err(|e| Error::contract(format!("config serialization failed: {e}")))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let ctx = path.display().to_string();
    let meta = CheckpointMeta {
        denoiser: trainer.model_cfg.clone(),
        train: trainer.train_cfg.clone(),
        iter: trainer.iter,
        adam_step: trainer.opt.step,
        config_hash: config_hash(&trainer.model_cfg, &trainer.train_cfg)?,
    };
    let header = serde_json::to_vec(&meta)
        .map_err(|e| Error::contract(format!("checkpoint header serialization failed: {e}")))?;

    let mut entries: Vec<(String, Tensor<f32>)> = trainer.params.entries().to_vec();
    for (i, (name, _)) in trainer.params.entries().iter().enumerate() {
        entries.push((format!("adam.m.{name}"), trainer.opt.m[i].clone()));
        entries.push((format!("adam.v.{name}"), trainer.opt.v[i].clone()));
    }

    let file = File::create(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(ctx.clone(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    write_tensor_blob_to(&mut w, &entries, &ctx)?;
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let ctx = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx.clone(), e))?;
    if &magic != MAGIC {
        return Err(Error::format(ctx, "bad magic, not a checkpoint"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(|e| Error::io(ctx.clone(), e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::format(ctx.clone(), format!("bad checkpoint header: {e}")))?;
    if meta.config_hash != config_hash(&meta.denoiser, &meta.train)? {
        return Err(Error::format(ctx.clone(), "config hash mismatch"));
    }

    let entries = read_tensor_blob_from(&mut r, &ctx)?;
    let mut params = Vec::new();
    let mut moments: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, tensor) in entries {
        if name.starts_with("adam.") {
            moments.push((name, tensor));
        } else {
            params.push((name, tensor));
        }
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, _) in &params {
        let find = |prefix: &str| -> Result<Tensor<f32>> {
            let key = format!("{prefix}{name}");
            moments
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format(ctx.clone(), format!("missing moment tensor {key}")))
        };
        m.push(find("adam.m.")?);
        v.push(find("adam.v.")?);
    }
    let opt = Adam { m, v, step: meta.adam_step };
    Trainer::from_parts(meta.train, meta.denoiser, ParamStore::from_entries(params), opt, meta.iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ViewAngles;
    use crate::data::gen_object;
    use crate::train::{TrainData, TrainMode};

    fn setup() -> Trainer {
        let model = DenoiserConfig {
            embed_dim: 32,
            depth: 1,
            heads: 2,
            n_noisy: 2,
            ..DenoiserConfig::default()
        };
        let cfg = TrainConfig {
            total_iters: 40,
            warmup_iters: 10,
            iter_0: 0,
            batch_size: 1,
            n_noisy: 2,
            m_novel: 2,
            seed: 21,
            mode: TrainMode::FinetuneObject,
            ..TrainConfig::default()
        };
        Trainer::new(cfg, model).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let objects = vec![gen_object(31).unwrap()];
        let data = TrainData { objects: &objects, scenes: &[], angles: ViewAngles::default() };
        let mut tr = setup();
        tr.run(&data, 2, None).unwrap();
        save_checkpoint(&path, &tr).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.iter, tr.iter);
        assert_eq!(back.opt.step, tr.opt.step);
        assert_eq!(back.train_cfg, tr.train_cfg);
        assert_eq!(back.model_cfg, tr.model_cfg);
        assert_eq!(back.params.entries(), tr.params.entries());
        assert_eq!(back.opt.m.len(), tr.opt.m.len());
        for i in 0..tr.opt.m.len() {
            assert_eq!(back.opt.m[i], tr.opt.m[i]);
            assert_eq!(back.opt.v[i], tr.opt.v[i]);
        }
    }

    #[test]
    fn resume_reproduces_the_trajectory_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let objects = vec![gen_object(32).unwrap()];
        let data = TrainData { objects: &objects, scenes: &[], angles: ViewAngles::default() };

        let mut a = setup();
        a.run(&data, 3, None).unwrap();
        save_checkpoint(&path, &a).unwrap();
        let tail_a: Vec<f64> = a.run(&data, 3, None).unwrap().iter().map(|s| s.loss).collect();

        let mut b = load_checkpoint(&path).unwrap();
        let tail_b: Vec<f64> = b.run(&data, 3, None).unwrap().iter().map(|s| s.loss).collect();
        assert_eq!(tail_a, tail_b, "resumed loss curve must match bit-exactly");
        let bits = |t: &Trainer| -> Vec<u32> {
            t.params.entries().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"DSTBnot really").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
