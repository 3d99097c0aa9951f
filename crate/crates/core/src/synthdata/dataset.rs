use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{sample_camera_with, CameraModel, CameraSampling, Intrinsics};
use super::features::stub_features;
use super::render::{add_depth_noise, apply_occlusion, backproject, render_depth};
use super::shapes::{sample_surface, PrimitiveKind, PrimitiveShape};
use super::SynthError;
use crate::geometry::{PointSet, Pose, RotationMatrix, SizeVec, SymmetrySpec, Vec3, Mat3};
use crate::numeric::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "samples.bin";
pub const DENSE_POINTS: usize = 2048;

// per-sample seed streams
const STREAM_CAMERA: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PIXELS: u64 = 3;
const STREAM_OCCLUSION: u64 = 4;
const STREAM_FEATURES: u64 = 5;
const STREAM_DENSE: u64 = 6;
const STREAM_TEXTURE: u64 = 7;

/// How texture seeds are assigned to instances. `Shared` behaves like one
/// fixed feature extractor for the whole dataset; `PerInstance` gives every
/// instance its own encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    #[default]
    Shared,
    PerInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub categories: Vec<PrimitiveKind>,
    pub instances_per_category: usize,
    pub views_per_instance: usize,
    /// Percent of observed pixels hidden by the disk occluder: 0, 25, 50 or 75.
    pub occlusion_percent: u8,
    pub seed: u64,
    pub n_points: usize,
    pub d_f: usize,
    pub depth_noise_sigma: f64,
    pub feature_noise_sigma: f64,
    pub camera: CameraSampling,
    pub texture: TextureMode,
    pub texture_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: vec![PrimitiveKind::Box, PrimitiveKind::Cylinder, PrimitiveKind::Cone, PrimitiveKind::LBracket],
            instances_per_category: 2,
            views_per_instance: 20,
            occlusion_percent: 0,
            seed: 0,
            n_points: 1024,
            d_f: 32,
            depth_noise_sigma: 0.0,
            feature_noise_sigma: 0.0,
            camera: CameraSampling::default(),
            texture: TextureMode::Shared,
            texture_seed: 0x5EED_7E47,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        if self.instances_per_category == 0 || self.views_per_instance == 0 || self.n_points == 0 {
            return bad("instances, views and points must be positive".into());
        }
        if ![0, 25, 50, 75].contains(&self.occlusion_percent) {
            return Err(SynthError::InvalidOcclusion(self.occlusion_percent as f64 / 100.0));
        }
        if self.d_f < super::features::MIN_FEATURE_DIM {
            return bad(format!("d_f must be >= {}", super::features::MIN_FEATURE_DIM));
        }
        if !(self.depth_noise_sigma >= 0.0 && self.feature_noise_sigma >= 0.0) {
            return bad("noise sigmas must be >= 0".into());
        }
        self.camera.intrinsics.validate()
    }

    pub fn sample_count(&self) -> usize {
        self.categories.len() * self.instances_per_category * self.views_per_instance
    }
}

/// One observation of one primitive instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub index: usize,
    pub category: PrimitiveKind,
    pub instance: usize,
    pub view: usize,
    pub shape: PrimitiveShape,
    /// Observed points in the camera frame, `n_points` of them.
    pub partial: PointSet,
    pub pixel_coords: Vec<[i32; 2]>,
    /// `n_points × d_f`, row-major.
    pub features: Vec<f64>,
    pub d_f: usize,
    /// Object canonical frame → camera frame.
    pub gt_pose: Pose,
    pub gt_size: SizeVec,
    pub gt_dense: PointSet,
    pub symmetry: SymmetrySpec,
    pub camera: CameraModel,
    pub occlusion_level: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub category: PrimitiveKind,
    pub instance: usize,
    pub view: usize,
    pub offset: u64,
    pub byte_len: u64,
    pub symmetry: SymmetrySpec,
    pub intrinsics: Intrinsics,
    pub camera_pose: Pose,
    pub texture_seed: u64,
    pub occlusion_level: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub n_points: usize,
    pub d_f: usize,
    pub dense_points: usize,
    /// Blob layout per sample, as little-endian 32-bit values.
    pub layout: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_points(p: &PointSet) -> PointSet {
    PointSet::new(p.points().iter().map(|v| v.map(q)).collect()).expect("finite")
}

/// Rounds every stored quantity to `f32` so that on-disk and in-memory
/// samples agree exactly.
fn quantize(mut s: SceneSample) -> SceneSample {
    s.partial = quantize_points(&s.partial);
    s.features.iter_mut().for_each(|v| *v = q(*v));
    s.gt_dense = quantize_points(&s.gt_dense);
    let rot = RotationMatrix::new_unchecked(s.gt_pose.rotation.matrix().map(q));
    s.gt_pose = Pose { rotation: rot, translation: s.gt_pose.translation.map(q) };
    s.gt_size = SizeVec::from_vec(s.gt_size.extents().map(q)).expect("positive");
    s.shape.size = s.gt_size;
    s
}

fn instance_seed(cfg: &DatasetConfig, cat_idx: usize, instance: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, cat_idx as u64), instance as u64)
}

/// Builds sample `index` (category-major, then instance, then view).
pub fn generate_sample(cfg: &DatasetConfig, index: usize) -> Result<SceneSample, SynthError> {
    let per_cat = cfg.instances_per_category * cfg.views_per_instance;
    let (cat_idx, rem) = (index / per_cat, index % per_cat);
    let (instance, view) = (rem / cfg.views_per_instance, rem % cfg.views_per_instance);
    let category = *cfg.categories.get(cat_idx).ok_or_else(|| SynthError::InvalidConfig(format!("sample {index} out of range")))?;
    let inst = instance_seed(cfg, cat_idx, instance);
    let texture_seed = match cfg.texture {
        TextureMode::Shared => cfg.texture_seed,
        TextureMode::PerInstance => derive_seed(inst, STREAM_TEXTURE),
    };
    let shape = PrimitiveShape::random(category, &mut ChaCha8Rng::seed_from_u64(inst), texture_seed);
    let seed = derive_seed(inst, 1000 + view as u64);
    let camera = sample_camera_with(derive_seed(seed, STREAM_CAMERA), &cfg.camera)?;
    // the object sits at the world origin in its canonical orientation
    let gt_pose = camera.world_to_camera();
    let mut depth = render_depth(&shape, &gt_pose, &camera)?;
    add_depth_noise(&mut depth, cfg.depth_noise_sigma, derive_seed(seed, STREAM_NOISE));
    let (partial, pixels) = backproject(&depth, &camera, cfg.n_points, derive_seed(seed, STREAM_PIXELS))?;
    let fraction = cfg.occlusion_percent as f64 / 100.0;
    let (partial, pixel_coords) = apply_occlusion(&partial, &pixels, fraction, derive_seed(seed, STREAM_OCCLUSION))?;
    let features = stub_features(
        &shape,
        &gt_pose,
        &partial,
        &pixel_coords,
        cfg.d_f,
        cfg.feature_noise_sigma,
        derive_seed(seed, STREAM_FEATURES),
    )?;
    let gt_dense = sample_surface(&shape, &gt_pose, DENSE_POINTS, derive_seed(seed, STREAM_DENSE));
    Ok(quantize(SceneSample {
        index,
        category,
        instance,
        view,
        shape,
        partial,
        pixel_coords,
        features,
        d_f: cfg.d_f,
        gt_pose,
        gt_size: shape.size,
        gt_dense,
        symmetry: shape.symmetry,
        camera,
        occlusion_level: cfg.occlusion_percent,
    }))
}

/// All samples of a config, in index order. Generation is per-sample
/// independent, so threads split the index range without changing results.
pub fn generate_samples(cfg: &DatasetConfig) -> Result<Vec<SceneSample>, SynthError> {
    cfg.validate()?;
    let n = cfg.sample_count();
    let threads = std::thread::available_parallelism().map(|t| t.get()).unwrap_or(1).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(|i| generate_sample(cfg, i)).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<SceneSample>, SynthError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(|i| generate_sample(cfg, i)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn layout(n: usize, d_f: usize) -> Vec<String> {
    vec![
        format!("partial f32 {n}x3"),
        format!("pixel_coords i32 {n}x2"),
        format!("features f32 {n}x{d_f}"),
        "gt_rotation f32 3x3 row-major".into(),
        "gt_translation f32 3".into(),
        "gt_size f32 3".into(),
        format!("gt_dense f32 {DENSE_POINTS}x3"),
    ]
}

fn sample_bytes(s: &SceneSample) -> Vec<u8> {
    let mut b = Vec::new();
    let mut f = |v: f64| b.extend_from_slice(&(v as f32).to_le_bytes());
    for p in s.partial.points() {
        p.iter().for_each(|v| f(*v));
    }
    let mut b2 = Vec::new();
    for px in &s.pixel_coords {
        b2.extend_from_slice(&px[0].to_le_bytes());
        b2.extend_from_slice(&px[1].to_le_bytes());
    }
    let mut rest = Vec::new();
    let mut g = |v: f64| rest.extend_from_slice(&(v as f32).to_le_bytes());
    s.features.iter().for_each(|v| g(*v));
    s.gt_pose.rotation.row_major().iter().for_each(|v| g(*v));
    s.gt_pose.translation.iter().for_each(|v| g(*v));
    s.gt_size.extents().iter().for_each(|v| g(*v));
    for p in s.gt_dense.points() {
        p.iter().for_each(|v| g(*v));
    }
    b.extend(b2);
    b.extend(rest);
    b
}

/// Writes `manifest.json` and `samples.bin` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, samples: &[SceneSample]) -> Result<Manifest, SynthError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let bytes = sample_bytes(s);
        records.push(SampleRecord {
            index: s.index,
            category: s.category,
            instance: s.instance,
            view: s.view,
            offset: blob.len() as u64,
            byte_len: bytes.len() as u64,
            symmetry: s.symmetry,
            intrinsics: s.camera.intrinsics,
            camera_pose: s.camera.pose,
            texture_seed: s.shape.texture_seed,
            occlusion_level: s.occlusion_level,
        });
        blob.extend(bytes);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        n_points: cfg.n_points,
        d_f: cfg.d_f,
        dense_points: DENSE_POINTS,
        layout: layout(cfg.n_points, cfg.d_f),
        samples: records,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest, SynthError> {
    let samples = generate_samples(cfg)?;
    write_dataset(dir, cfg, &samples)
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SceneSample>,
}

/// Accepts either the dataset directory or the path of its manifest.
pub fn load_manifest(path: &Path) -> Result<(Manifest, std::path::PathBuf), SynthError> {
    let (manifest_path, dir) = if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(SynthError::Format(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok((manifest, dir))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> Result<[u8; 4], SynthError> {
        let b = self.bytes.get(self.pos..self.pos + 4).ok_or_else(|| SynthError::Format("truncated sample blob".into()))?;
        self.pos += 4;
        Ok([b[0], b[1], b[2], b[3]])
    }
    fn f(&mut self) -> Result<f64, SynthError> {
        Ok(f32::from_le_bytes(self.take4()?) as f64)
    }
    fn i(&mut self) -> Result<i32, SynthError> {
        Ok(i32::from_le_bytes(self.take4()?))
    }
    fn points(&mut self, n: usize) -> Result<PointSet, SynthError> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(Vec3::new(self.f()?, self.f()?, self.f()?));
        }
        Ok(PointSet::new(v)?)
    }
}

fn decode_sample(m: &Manifest, r: &SampleRecord, bytes: &[u8]) -> Result<SceneSample, SynthError> {
    let n = m.n_points;
    let mut rd = Reader { bytes, pos: 0 };
    let partial = rd.points(n)?;
    let mut pixel_coords = Vec::with_capacity(n);
    for _ in 0..n {
        pixel_coords.push([rd.i()?, rd.i()?]);
    }
    let features = (0..n * m.d_f).map(|_| rd.f()).collect::<Result<Vec<_>, _>>()?;
    let rot: Vec<f64> = (0..9).map(|_| rd.f()).collect::<Result<_, _>>()?;
    let rotation = RotationMatrix::new_unchecked(Mat3::from_row_slice(&rot));
    let translation = Vec3::new(rd.f()?, rd.f()?, rd.f()?);
    let gt_size = SizeVec::new(rd.f()?, rd.f()?, rd.f()?)?;
    let gt_dense = rd.points(m.dense_points)?;
    if rd.pos != bytes.len() {
        return Err(SynthError::Format(format!("sample {} has {} trailing bytes", r.index, bytes.len() - rd.pos)));
    }
    // validation tolerance covers the f32 rounding of the stored matrix
    RotationMatrix::new(*rotation.matrix())?;
    let mut shape = PrimitiveShape::new(r.category, gt_size, r.texture_seed)?;
    shape.size = gt_size;
    Ok(SceneSample {
        index: r.index,
        category: r.category,
        instance: r.instance,
        view: r.view,
        shape,
        partial,
        pixel_coords,
        features,
        d_f: m.d_f,
        gt_pose: Pose { rotation, translation },
        gt_size,
        gt_dense,
        symmetry: r.symmetry,
        camera: CameraModel::new(r.intrinsics, r.camera_pose)?,
        occlusion_level: r.occlusion_level,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SynthError> {
    let (manifest, dir) = load_manifest(path)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for r in &manifest.samples {
        let (a, b) = (r.offset as usize, (r.offset + r.byte_len) as usize);
        let bytes = blob.get(a..b).ok_or_else(|| SynthError::Format(format!("sample {} outside blob", r.index)))?;
        samples.push(decode_sample(&manifest, r, bytes)?);
    }
    Ok(Dataset { manifest, samples })
}

impl SceneSample {
    /// Camera-frame coordinates as a flat `N × 3` vector.
    pub fn partial_flat(&self) -> Vec<f64> {
        self.partial.to_flat()
    }
}
