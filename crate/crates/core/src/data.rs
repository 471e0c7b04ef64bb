//! Procedural synthetic assets (objects and scenes represented as
//! ground-truth Gaussian clouds rendered by this crate's own rasterizer),
//! constrained view selection, mixed batch composition, and dataset
//! manifest I/O.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{check_view_constraints, CameraPose, PoseRecord, ViewAngles};
use crate::denoiser::ProfileTag;
use crate::error::{Error, Result};
use crate::gaussian::{export_ply, import_ply, GaussianCloud, GaussianPrimitive};
use crate::raster::{render_naive, RenderConfig};
use crate::real::Real;

pub const IMAGE_SIZE: usize = 32;
pub const FOV_DEG: f64 = 50.0;
pub const OBJECT_POSES: usize = 32;
pub const SCENE_POSES: usize = 24;
/// Orbit radius placing the [-1,1]^3 cube's bounding sphere at the frame
/// edge for a 50 degree FOV: sqrt(3) / sin(25 deg).
pub const OBJECT_ORBIT_RADIUS: f64 = 4.0988;
const SELECT_VIEWS_MAX_DRAWS: usize = 10_000;

/// Ground-truth asset: cloud, poses, and quantized rendered images.
#[derive(Clone)]
pub struct SyntheticAsset {
    pub id: String,
    pub profile: ProfileTag,
    pub seed: u64,
    pub cloud: GaussianCloud<f32>,
    pub poses: Vec<CameraPose>,
    /// 8-bit RGB renders, one per pose, H x W x 3 row-major.
    pub images: Vec<Vec<u8>>,
}

impl SyntheticAsset {
    /// Stored image as scalars in [0, 1].
    pub fn image_as<S: Real>(&self, index: usize) -> Vec<S> {
        self.images[index].iter().map(|&b| S::of(b as f64 / 255.0)).collect()
    }

    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }
}

/// Renderer settings shared by dataset generation and the ground-truth
/// closure property (same config -> bit-exact re-render).
pub fn dataset_render_config() -> RenderConfig {
    RenderConfig::default()
}

/// Quantize a [0,1] float image to 8-bit bytes.
pub fn quantize_image<S: Real>(image: &[S]) -> Vec<u8> {
    image
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let ctx = || path.display().to_string();
    if rgb.len() != width * height * 3 {
        return Err(Error::contract(format!(
            "png buffer {} bytes for {width}x{height}x3",
            rgb.len()
        )));
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::format(ctx(), "buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(ctx(), e.to_string()))
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let ctx = || path.display().to_string();
    let img = image::open(path).map_err(|e| Error::format(ctx(), e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

fn render_asset_images(cloud: &GaussianCloud<f32>, poses: &[CameraPose]) -> Result<Vec<Vec<u8>>> {
    let cfg = dataset_render_config();
    poses
        .iter()
        .map(|pose| {
            let mut out = render_naive(cloud, pose, &cfg)?;
            out.drop_records();
            Ok(quantize_image(&out.image))
        })
        .collect()
}

/// Random blob-composition object inside [-1,1]^3 with 32 orbit poses.
pub fn gen_object(seed: u64) -> Result<SyntheticAsset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_clusters = rng.gen_range(3..=6);
    let mut primitives = Vec::new();
    let total = rng.gen_range(20..=60);
    for _ in 0..total {
        let cluster = rng.gen_range(0..n_clusters);
        // deterministic cluster centers derived from the same stream
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ (0xC0FFEE + cluster as u64));
        let center = Vector3::new(
            crng.gen_range(-0.55..0.55f64),
            crng.gen_range(-0.55..0.55),
            crng.gen_range(-0.55..0.55),
        );
        let hue: [f32; 3] = [crng.gen_range(0.1..0.95), crng.gen_range(0.1..0.95), crng.gen_range(0.1..0.95)];
        let mu = center
            + Vector3::new(
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
            );
        let mu = mu.map(|v| v.clamp(-0.85, 0.85));
        primitives.push(GaussianPrimitive {
            mu: mu.map(|v| v as f32),
            quat: [
                rng.gen_range(0.3..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            scale: Vector3::new(
                rng.gen_range(0.05..0.25f32),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
            ),
            opacity: rng.gen_range(0.35..0.95),
            color: [
                (hue[0] + rng.gen_range(-0.08..0.08f32)).clamp(0.02, 0.98),
                (hue[1] + rng.gen_range(-0.08..0.08f32)).clamp(0.02, 0.98),
                (hue[2] + rng.gen_range(-0.08..0.08f32)).clamp(0.02, 0.98),
            ],
        });
    }
    let cloud = GaussianCloud { primitives };

    // Orbit in 4 azimuth clusters of 8 (full coverage of the object, but
    // each cluster is mutually within the default view-angle constraints,
    // so constraint-satisfying 8-view sets exist).
    let mut poses = Vec::with_capacity(OBJECT_POSES);
    for i in 0..OBJECT_POSES {
        let cluster = (i / 8) as f64;
        let azimuth = (cluster * 90.0 + rng.gen_range(-18.0f64..18.0)).to_radians();
        let elevation = rng.gen_range(-8.0f64..8.0).to_radians();
        let eye = Vector3::new(
            OBJECT_ORBIT_RADIUS * elevation.cos() * azimuth.cos(),
            OBJECT_ORBIT_RADIUS * elevation.sin(),
            OBJECT_ORBIT_RADIUS * elevation.cos() * azimuth.sin(),
        );
        let rot = CameraPose::look_at_rotation(eye, Vector3::zeros(), Vector3::y());
        poses.push(CameraPose::from_fov_deg(rot, eye, FOV_DEG, IMAGE_SIZE, IMAGE_SIZE)?);
    }
    let images = render_asset_images(&cloud, &poses)?;
    Ok(SyntheticAsset {
        id: format!("obj_{seed:08}"),
        profile: ProfileTag::Object,
        seed,
        cloud,
        poses,
        images,
    })
}

/// Room-like scene (floor/wall sheets + interior blobs) with a continuous
/// 24-pose dolly or pan trajectory; the first camera sits at the world
/// origin (scene normalization is baked into the asset).
pub fn gen_scene(seed: u64) -> Result<SyntheticAsset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();
    // floor: a row of flattened sheets at y = +1.5 (image y grows downward)
    for i in 0..6 {
        primitives.push(GaussianPrimitive {
            mu: Vector3::new(rng.gen_range(-2.0..2.0f32), 1.5, 3.0 + i as f32 * 2.0),
            quat: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(2.5, 0.05, 1.5),
            opacity: 0.9,
            color: [0.45, 0.4, 0.35],
        });
    }
    // back wall
    for i in 0..3 {
        primitives.push(GaussianPrimitive {
            mu: Vector3::new((i as f32 - 1.0) * 2.5, 0.0, 14.0),
            quat: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(2.0, 2.0, 0.05),
            opacity: 0.9,
            color: [0.55, 0.55, 0.6],
        });
    }
    // interior blobs
    for _ in 0..rng.gen_range(10..=20) {
        primitives.push(GaussianPrimitive {
            mu: Vector3::new(
                rng.gen_range(-2.0..2.0f32),
                rng.gen_range(-1.0..1.3),
                rng.gen_range(4.0..12.0),
            ),
            quat: [
                rng.gen_range(0.3..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            scale: Vector3::new(
                rng.gen_range(0.1..0.5f32),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.1..0.5),
            ),
            opacity: rng.gen_range(0.4..0.95),
            color: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
        });
    }
    let cloud = GaussianCloud { primitives };

    // trajectory: dolly along +z or a panning arc, 24 bounded steps
    let dolly = rng.gen_bool(0.5);
    let mut poses = Vec::with_capacity(SCENE_POSES);
    for i in 0..SCENE_POSES {
        let s = i as f64;
        let (eye, yaw) = if dolly {
            (Vector3::new(0.0, 0.0, s * 0.08), 0.0f64)
        } else {
            let a = (s * 0.8f64).to_radians();
            (Vector3::new(a.sin() * 1.5, 0.0, (1.0 - a.cos()) * 1.5), a)
        };
        let fwd = Vector3::new(yaw.sin(), 0.0, yaw.cos());
        let rot = CameraPose::look_at_rotation(eye, eye + fwd, Vector3::y());
        poses.push(CameraPose::from_fov_deg(rot, eye, FOV_DEG, IMAGE_SIZE, IMAGE_SIZE)?);
    }
    let images = render_asset_images(&cloud, &poses)?;
    Ok(SyntheticAsset {
        id: format!("scn_{seed:08}"),
        profile: ProfileTag::Scene,
        seed,
        cloud,
        poses,
        images,
    })
}

/// Condition / noisy / novel pose indices into an asset's pose list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    pub condition: usize,
    pub noisy: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ViewSet {
    pub fn all_indices(&self) -> Vec<usize> {
        let mut v = vec![self.condition];
        v.extend(&self.noisy);
        v.extend(&self.novel);
        v
    }

    /// Re-check Eqs. 9-10 against an asset's poses.
    pub fn revalidate(&self, asset: &SyntheticAsset, angles: &ViewAngles) -> Result<bool> {
        let noisy: Vec<CameraPose> = self.noisy.iter().map(|&i| asset.poses[i].clone()).collect();
        let novel: Vec<CameraPose> = self.novel.iter().map(|&i| asset.poses[i].clone()).collect();
        let report =
            check_view_constraints(&asset.poses[self.condition], &noisy, &novel, angles)?;
        Ok(report.all_pass())
    }
}

/// Rejection-sample a constraint-satisfying ViewSet. Deterministic given
/// the seed; errors (naming the tightest constraint) after 10^4 draws.
pub fn select_views(
    asset: &SyntheticAsset,
    n: usize,
    m: usize,
    angles: &ViewAngles,
    seed: u64,
) -> Result<ViewSet> {
    let needed = n + m + 1;
    // the first scene pose sits at the world origin, which makes position
    // angles degenerate; exclude it from selection
    let first = if asset.profile == ProfileTag::Scene { 1 } else { 0 };
    let available: Vec<usize> = (first..asset.n_poses()).collect();
    if available.len() < needed {
        return Err(Error::contract(format!(
            "asset {} has {} usable poses, need {needed}",
            asset.id,
            available.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tightest: Option<(String, f64)> = None;
    // localized proposal: noisy/novel candidates are the condition's
    // nearest poses by position angle (the constraints are local, so a
    // uniform proposal over all index tuples would almost never land)
    let neighborhood = (needed - 1).max(12).min(available.len() - 1);
    for _ in 0..SELECT_VIEWS_MAX_DRAWS {
        let condition = available[rng.gen_range(0..available.len())];
        let cdir = asset.poses[condition].center().normalize();
        let mut others: Vec<usize> =
            available.iter().copied().filter(|&i| i != condition).collect();
        others.sort_by(|&a, &b| {
            let da = -asset.poses[a].center().normalize().dot(&cdir);
            let db = -asset.poses[b].center().normalize().dot(&cdir);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let mut pool = others[..neighborhood].to_vec();
        for k in 0..needed - 1 {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        let set = ViewSet {
            condition,
            noisy: pool[..n].to_vec(),
            novel: pool[n..needed - 1].to_vec(),
        };
        let noisy: Vec<CameraPose> = set.noisy.iter().map(|&i| asset.poses[i].clone()).collect();
        let novel: Vec<CameraPose> = set.novel.iter().map(|&i| asset.poses[i].clone()).collect();
        let report = check_view_constraints(&asset.poses[set.condition], &noisy, &novel, angles)?;
        if report.all_pass() {
            return Ok(set);
        }
        if let Some(worst) = report.tightest() {
            let margin = worst.angle_deg - worst.limit_deg;
            if tightest.as_ref().map_or(true, |(_, m)| margin > *m) {
                tightest = Some((format!("{:?}", worst.kind), margin));
            }
        }
    }
    let (kind, margin) = tightest.unwrap_or(("none".into(), 0.0));
    Err(Error::ConstraintsUnsatisfiable(format!(
        "no satisfying view assignment for {} after {SELECT_VIEWS_MAX_DRAWS} draws; \
         tightest constraint {kind} exceeded its limit by up to {margin:.2} degrees",
        asset.id
    )))
}

/// One training example: which asset and which views.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Index into the object or scene asset list, per `profile`.
    pub asset_index: usize,
    pub profile: ProfileTag,
    pub views: ViewSet,
}

/// Draw `count` items, each from the object stream with probability
/// `object_fraction`, selecting constraint-valid views per item.
pub fn mixed_batch(
    objects: &[SyntheticAsset],
    scenes: &[SyntheticAsset],
    object_fraction: f64,
    n: usize,
    m: usize,
    angles: &ViewAngles,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    if !(0.0..=1.0).contains(&object_fraction) {
        return Err(Error::contract(format!("object_fraction {object_fraction} outside [0,1]")));
    }
    if object_fraction > 0.0 && objects.is_empty() {
        return Err(Error::contract("mixed_batch: object stream required but empty"));
    }
    if object_fraction < 1.0 && scenes.is_empty() {
        return Err(Error::contract("mixed_batch: scene stream required but empty"));
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let take_object = rng.gen_bool(object_fraction);
        let (pool, profile) =
            if take_object { (objects, ProfileTag::Object) } else { (scenes, ProfileTag::Scene) };
        let asset_index = rng.gen_range(0..pool.len());
        let views = select_views(&pool[asset_index], n, m, angles, rng.gen())?;
        items.push(BatchItem { asset_index, profile, views });
    }
    Ok(items)
}

// ---------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestAsset {
    pub id: String,
    pub profile: ProfileTag,
    pub seed: u64,
    /// Asset directory relative to the manifest.
    pub dir: String,
    pub pose_files: Vec<String>,
    pub image_files: Vec<String>,
    pub cloud_file: String,
    /// Normalization convention baked into the asset.
    pub normalization: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub angles: ViewAngles,
    pub assets: Vec<ManifestAsset>,
}

/// Per-asset metadata stored alongside its poses and images.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssetMeta {
    id: String,
    profile: ProfileTag,
    seed: u64,
    n_poses: usize,
    width: usize,
    height: usize,
    fov_deg: f64,
    normalization: String,
}

fn normalization_note(profile: ProfileTag) -> String {
    match profile {
        ProfileTag::Object => "object centered and scaled into [-1,1]^3".into(),
        ProfileTag::Scene => "first trajectory camera at the world origin".into(),
    }
}

/// Write assets under `root/<asset_id>/{meta.json, pose_###.json,
/// img_###.png, cloud.ply}` plus `root/manifest.json`.
pub fn write_dataset(root: &Path, assets: &[SyntheticAsset], angles: &ViewAngles) -> Result<PathBuf> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |e: std::io::Error| Error::io(p.clone(), e)
    };
    fs::create_dir_all(root).map_err(io(root))?;
    let mut records = Vec::with_capacity(assets.len());
    for asset in assets {
        let dir = root.join(&asset.id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let mut pose_files = Vec::new();
        let mut image_files = Vec::new();
        for (i, (pose, image)) in asset.poses.iter().zip(&asset.images).enumerate() {
            let pose_name = format!("pose_{i:03}.json");
            let img_name = format!("img_{i:03}.png");
            let pose_path = dir.join(&pose_name);
            let json = serde_json::to_string_pretty(&PoseRecord::from(pose))
                .map_err(|e| Error::format(pose_path.display().to_string(), e.to_string()))?;
            fs::write(&pose_path, json).map_err(io(&pose_path))?;
            write_png(&dir.join(&img_name), pose.width, pose.height, image)?;
            pose_files.push(pose_name);
            image_files.push(img_name);
        }
        export_ply(&asset.cloud, &dir.join("cloud.ply"))?;
        let meta = AssetMeta {
            id: asset.id.clone(),
            profile: asset.profile,
            seed: asset.seed,
            n_poses: asset.n_poses(),
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            fov_deg: FOV_DEG,
            normalization: normalization_note(asset.profile),
        };
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
        fs::write(&meta_path, json).map_err(io(&meta_path))?;
        records.push(ManifestAsset {
            id: asset.id.clone(),
            profile: asset.profile,
            seed: asset.seed,
            dir: asset.id.clone(),
            pose_files,
            image_files,
            cloud_file: "cloud.ply".into(),
            normalization: normalization_note(asset.profile),
        });
    }
    let manifest = DatasetManifest {
        fov_deg: FOV_DEG,
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        angles: *angles,
        assets: records,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    fs::write(&path, json).map_err(io(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let ctx = || path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(ctx(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(ctx(), e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    for a in &manifest.assets {
        let dir = root.join(&a.dir);
        for f in a.pose_files.iter().chain(&a.image_files).chain(std::iter::once(&a.cloud_file)) {
            let p = dir.join(f);
            if !p.exists() {
                return Err(Error::format(ctx(), format!("missing referenced file {}", p.display())));
            }
        }
    }
    Ok(manifest)
}

/// Load one asset back from disk.
pub fn load_asset(manifest_path: &Path, record: &ManifestAsset) -> Result<SyntheticAsset> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let dir = root.join(&record.dir);
    let cloud = import_ply(&dir.join(&record.cloud_file))?;
    let mut poses = Vec::with_capacity(record.pose_files.len());
    for f in &record.pose_files {
        let p = dir.join(f);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let rec: PoseRecord = serde_json::from_str(&text)
            .map_err(|e| Error::format(p.display().to_string(), e.to_string()))?;
        poses.push(CameraPose::try_from(&rec)?);
    }
    let mut images = Vec::with_capacity(record.image_files.len());
    for f in &record.image_files {
        let p = dir.join(f);
        let (w, h, rgb) = read_png(&p)?;
        if w * h * 3 != rgb.len() || poses.first().map_or(false, |p0| p0.width != w || p0.height != h) {
            return Err(Error::format(p.display().to_string(), "image size mismatch"));
        }
        images.push(rgb);
    }
    if images.len() != poses.len() {
        return Err(Error::contract(format!(
            "asset {}: {} poses vs {} images",
            record.id,
            poses.len(),
            images.len()
        )));
    }
    Ok(SyntheticAsset {
        id: record.id.clone(),
        profile: record.profile,
        seed: record.seed,
        cloud,
        poses,
        images,
    })
}
