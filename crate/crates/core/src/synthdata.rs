//! Procedural scene generator producing paired radar/LiDAR/depth samples
//! with radar-typical pathologies (elevation collapse, range noise,
//! sparsity), plus dataset persistence.
//!
//! Scenes are axis-aligned boxes on a ground plane, all in the camera frame,
//! so every surface query has a closed form. The "image" side of a sample is
//! an exact ray-cast depth map standing in for estimated metric depth.

use crate::blob::{self, BlobError};
use crate::geometry::{
    BevIntrinsics, CameraIntrinsics, EulerAngles, PointCloud, RigidTransform, SensorTag,
};
use crate::raster::{InfoMap, MapSource, ViewTag};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Axis-aligned box obstacle in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct BoxObstacle {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
}

impl BoxObstacle {
    fn min(&self) -> Vector3<f64> {
        self.center - self.half
    }

    fn max(&self) -> Vector3<f64> {
        self.center + self.half
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    /// Distance from `p` to the box surface (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let lo = self.min();
        let hi = self.max();
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (lo[i] - p[i]).max(0.0).max(p[i] - hi[i]);
            d2 += d * d;
        }
        d2.sqrt()
    }
}

/// One generated world: obstacles, camera height, and the true extrinsic.
#[derive(Debug, Clone)]
pub struct Scene {
    pub obstacles: Vec<BoxObstacle>,
    pub cam_height: f64,
    /// True radar -> camera transform.
    pub t_gt: RigidTransform,
}

/// Radar measurement pathology model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadarNoiseModel {
    /// Record returns at the radar plane height (elevation ambiguity).
    pub elevation_collapse: bool,
    /// Gaussian range noise, meters.
    pub depth_sigma: f64,
    /// Probability of dropping a return entirely.
    pub dropout_prob: f64,
    /// Upper bound on returned points.
    pub max_points: usize,
}

impl RadarNoiseModel {
    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self {
                elevation_collapse: true,
                depth_sigma: 0.02,
                dropout_prob: 0.10,
                max_points: 48,
            }),
            "clean" => Some(Self {
                elevation_collapse: true,
                depth_sigma: 0.0,
                dropout_prob: 0.0,
                max_points: 48,
            }),
            "heavy" => Some(Self {
                elevation_collapse: true,
                depth_sigma: 0.06,
                dropout_prob: 0.25,
                max_points: 32,
            }),
            _ => None,
        }
    }
}

impl Default for RadarNoiseModel {
    fn default() -> Self {
        Self::profile("standard").unwrap()
    }
}

/// Generation parameters shared by a whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub fv_dims: (usize, usize),
    pub bev_dims: (usize, usize),
    pub k: CameraIntrinsics,
    pub kb: BevIntrinsics,
    pub cam_height: f64,
    pub max_depth: f64,
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    pub lidar_points: usize,
    pub noise: RadarNoiseModel,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            fv_dims: (96, 192),
            bev_dims: (96, 96),
            k: CameraIntrinsics::new(128.0, 128.0, 96.0, 48.0),
            kb: BevIntrinsics::new(32.0, 32.0, 48.0, 0.0),
            cam_height: 0.4,
            max_depth: 3.5,
            obstacles_min: 4,
            obstacles_max: 8,
            lidar_points: 4000,
            noise: RadarNoiseModel::default(),
        }
    }
}

/// Nominal radar mount in the camera frame; per-scene jitter is added on top.
const RIG_NOMINAL_TRANS: [f64; 3] = [0.05, -0.15, 0.08];
const RIG_TRANS_JITTER: f64 = 0.05;
const RIG_ROT_JITTER_DEG: f64 = 2.0;

/// Frustum bounds for obstacle placement (bench-top scene scale).
const FRUSTUM_Z: (f64, f64) = (1.0, 2.8);
const FRUSTUM_X_FRAC: f64 = 0.45;

/// Deterministic per-seed scene: obstacle layout and the true extrinsic are
/// both drawn from the seed.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(config.obstacles_min..=config.obstacles_max);
    let mut obstacles = Vec::with_capacity(count);
    for _ in 0..count {
        let z = rng.gen_range(FRUSTUM_Z.0..FRUSTUM_Z.1);
        let x_span = FRUSTUM_X_FRAC * z;
        let x = rng.gen_range(-x_span..x_span);
        let half = Vector3::new(
            rng.gen_range(0.08..0.35),
            rng.gen_range(0.05..0.35),
            rng.gen_range(0.08..0.35),
        );
        // Boxes rest on the ground plane y = -cam_height.
        let center = Vector3::new(x, -config.cam_height + half.y, z);
        let ob = BoxObstacle { center, half };
        debug_assert!(ob.center.z - ob.half.z > 0.5, "obstacle too close");
        obstacles.push(ob);
    }
    let rot = EulerAngles::new(
        crate::geometry::deg_to_rad(rng.gen_range(-RIG_ROT_JITTER_DEG..=RIG_ROT_JITTER_DEG)),
        crate::geometry::deg_to_rad(rng.gen_range(-RIG_ROT_JITTER_DEG..=RIG_ROT_JITTER_DEG)),
        crate::geometry::deg_to_rad(rng.gen_range(-RIG_ROT_JITTER_DEG..=RIG_ROT_JITTER_DEG)),
    );
    let trans = Vector3::new(
        RIG_NOMINAL_TRANS[0] + rng.gen_range(-RIG_TRANS_JITTER..=RIG_TRANS_JITTER),
        RIG_NOMINAL_TRANS[1] + rng.gen_range(-RIG_TRANS_JITTER..=RIG_TRANS_JITTER),
        RIG_NOMINAL_TRANS[2] + rng.gen_range(-RIG_TRANS_JITTER..=RIG_TRANS_JITTER),
    );
    let t_gt = RigidTransform::new(rot.to_matrix(), trans);
    assert!(t_gt.translation.norm() < 3.0, "rig translation out of bounds");
    for ob in &obstacles {
        assert!(in_frustum(ob), "obstacle escaped the frustum");
    }
    Scene {
        obstacles,
        cam_height: config.cam_height,
        t_gt,
    }
}

fn in_frustum(ob: &BoxObstacle) -> bool {
    let z = ob.center.z;
    z > FRUSTUM_Z.0 - 0.5
        && z < FRUSTUM_Z.1 + 0.5
        && ob.center.x.abs() <= FRUSTUM_X_FRAC * z + ob.half.x + 1e-9
}

/// First surface hit along the camera ray through pixel (u, v); returns the
/// depth (camera-frame Z) or None. The ray passes through integer pixel
/// coordinates so depth pixels unproject exactly onto the cast surface.
pub fn cast_depth(scene: &Scene, u: f64, v: f64, k: &CameraIntrinsics, max_depth: f64) -> Option<f64> {
    let dir = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let mut best = f64::INFINITY;
    // Ground plane y = -cam_height.
    if dir.y < -1e-9 {
        let t = -scene.cam_height / dir.y;
        if t > 0.0 {
            best = best.min(t);
        }
    }
    for ob in &scene.obstacles {
        if let Some(t) = ray_aabb(&dir, ob) {
            best = best.min(t);
        }
    }
    (best.is_finite() && best <= max_depth && best > crate::geometry::EPS_DEPTH).then_some(best)
}

/// Slab test for a ray from the origin; returns the entry parameter, which
/// equals camera depth because dir.z == 1.
fn ray_aabb(dir: &Vector3<f64>, ob: &BoxObstacle) -> Option<f64> {
    let lo = ob.min();
    let hi = ob.max();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if 0.0 < lo[i] || 0.0 > hi[i] {
                return None;
            }
            continue;
        }
        let mut t0 = lo[i] / dir[i];
        let mut t1 = hi[i] / dir[i];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    (t_far > 0.0 && t_near > 1e-9).then_some(t_near)
}

/// True if `p` is the first surface along its own camera ray (no occluder).
fn visible(scene: &Scene, p: &Vector3<f64>, max_depth: f64) -> bool {
    if p.z <= crate::geometry::EPS_DEPTH || p.z > max_depth {
        return false;
    }
    let k_unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0);
    let u = p.x / p.z;
    let v = p.y / p.z;
    match cast_depth(scene, u, v, &k_unit, max_depth) {
        Some(d) => (d - p.z).abs() < 1e-6,
        None => false,
    }
}

/// Uniform point on the surface of a box, faces weighted by area.
fn sample_box_surface(ob: &BoxObstacle, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let h = ob.half;
    let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    let local = match face {
        0 => Vector3::new(-h.x, u * h.y, v * h.z),
        1 => Vector3::new(h.x, u * h.y, v * h.z),
        2 => Vector3::new(u * h.x, -h.y, v * h.z),
        3 => Vector3::new(u * h.x, h.y, v * h.z),
        4 => Vector3::new(u * h.x, v * h.y, -h.z),
        _ => Vector3::new(u * h.x, v * h.y, h.z),
    };
    ob.center + local
}

fn sample_ground(scene: &Scene, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z = rng.gen_range(0.7..FRUSTUM_Z.1);
    let x = rng.gen_range(-FRUSTUM_X_FRAC * z..FRUSTUM_X_FRAC * z);
    Vector3::new(x, -scene.cam_height, z)
}

/// Visible surface point, preferring obstacles over ground at the given odds.
fn sample_visible_surface(
    scene: &Scene,
    obstacle_frac: f64,
    max_depth: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vector3<f64>> {
    for _ in 0..64 {
        let p = if !scene.obstacles.is_empty() && rng.gen_bool(obstacle_frac) {
            let idx = rng.gen_range(0..scene.obstacles.len());
            sample_box_surface(&scene.obstacles[idx], rng)
        } else {
            sample_ground(scene, rng)
        };
        if visible(scene, &p, max_depth) {
            return Some(p);
        }
    }
    None
}

/// Everything one training/eval example needs.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub id: u32,
    pub t_gt: RigidTransform,
    /// Recorded radar returns, radar frame.
    pub radar: PointCloud,
    /// Dense accurate surface samples, camera frame.
    pub lidar: PointCloud,
    /// Exact ray-cast FV depth map (image side).
    pub depth: InfoMap,
}

/// Renders one sample from a scene: sparse noisy radar (radar frame), dense
/// accurate LiDAR (camera frame), and the exact depth map.
pub fn render_sample(
    scene: &Scene,
    config: &GenConfig,
    noise: &RadarNoiseModel,
    rng: &mut ChaCha8Rng,
) -> SampleData {
    // Depth map: exact geometry through every integer pixel.
    let (h, w) = config.fv_dims;
    let mut depth = InfoMap::empty(h, w, ViewTag::Fv, MapSource::Image);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = cast_depth(scene, x as f64, y as f64, &config.k, config.max_depth) {
                depth.set(y, x, d as f32);
            }
        }
    }

    // LiDAR: unbiased visible-surface samples, camera frame, exact positions.
    let mut lidar_pts = Vec::with_capacity(config.lidar_points);
    while lidar_pts.len() < config.lidar_points {
        match sample_visible_surface(scene, 0.7, config.max_depth, rng) {
            Some(p) => lidar_pts.push(p),
            None => break,
        }
    }
    let lidar = PointCloud::new(lidar_pts, SensorTag::Lidar);

    // Radar: visible surface reflectors, recorded in the radar frame with
    // elevation collapse, range noise, and dropout.
    let t_cam_to_radar = scene.t_gt.inverse();
    let mut radar_pts = Vec::with_capacity(noise.max_points);
    for _ in 0..noise.max_points {
        let Some(p_cam) = sample_visible_surface(scene, 0.8, config.max_depth, rng) else {
            break;
        };
        if noise.dropout_prob > 0.0 && rng.gen_bool(noise.dropout_prob) {
            continue;
        }
        let p_radar = t_cam_to_radar.apply(&p_cam);
        radar_pts.push(record_radar_return(&p_radar, noise, rng));
    }
    let radar = PointCloud::new(radar_pts, SensorTag::Radar);

    SampleData {
        id: 0,
        t_gt: scene.t_gt,
        radar,
        lidar,
        depth,
    }
}

/// Applies the measurement model to a true reflection point in the radar
/// frame: range gets Gaussian noise, elevation collapses to the radar plane
/// while azimuth and (noisy) range are preserved.
pub fn record_radar_return(
    p_true: &Vector3<f64>,
    noise: &RadarNoiseModel,
    rng: &mut ChaCha8Rng,
) -> Vector3<f64> {
    let range = p_true.norm();
    let noisy_range = if noise.depth_sigma > 0.0 {
        (range + gaussian(rng) * noise.depth_sigma).max(0.1)
    } else {
        range
    };
    if noise.elevation_collapse {
        let azimuth = p_true.x.atan2(p_true.z);
        Vector3::new(noisy_range * azimuth.sin(), 0.0, noisy_range * azimuth.cos())
    } else if range > 1e-12 {
        p_true * (noisy_range / range)
    } else {
        *p_true
    }
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-sample RNG stream derived from (seed, index).
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Generates `count` samples deterministically from `seed`.
pub fn generate_dataset(seed: u64, count: usize, config: &GenConfig) -> Vec<SampleData> {
    (0..count)
        .map(|i| {
            let scene_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let scene = generate_scene(scene_seed, config);
            let mut rng = sample_rng(seed, i as u64);
            let mut sample = render_sample(&scene, config, &config.noise, &mut rng);
            sample.id = i as u32;
            sample
        })
        .collect()
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blob error in {file}: {source}")]
    Blob {
        file: String,
        #[source]
        source: BlobError,
    },
    #[error("manifest version {0} unsupported (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("malformed blob {0}: {1}")]
    Malformed(String, &'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u32,
    /// Row-major 4x4 radar -> camera transform.
    pub t_gt: Vec<f64>,
    pub radar: BlobRef,
    pub radar_points: usize,
    pub lidar: BlobRef,
    pub lidar_points: usize,
    pub depth: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub k: CameraIntrinsics,
    pub kb: BevIntrinsics,
    pub cam_height: f64,
    pub fv_dims: (usize, usize),
    pub bev_dims: (usize, usize),
    pub max_depth: f64,
    pub noise: RadarNoiseModel,
    pub samples: Vec<SampleEntry>,
}

fn cloud_to_blob(cloud: &PointCloud) -> Vec<f32> {
    cloud
        .points
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect()
}

fn cloud_from_blob(dims: &[usize], data: &[f32], sensor: SensorTag, file: &str) -> Result<PointCloud, DatasetError> {
    if dims.len() != 2 || dims[1] != 3 {
        return Err(DatasetError::Malformed(file.into(), "expected n x 3 cloud"));
    }
    let points = data
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Ok(PointCloud::new(points, sensor))
}

/// Writes samples and a checksummed manifest. Identical inputs produce
/// byte-identical directories.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    config: &GenConfig,
    samples: &[SampleData],
) -> Result<Manifest, DatasetError> {
    std::fs::create_dir_all(dir.join("blobs"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let radar_rel = format!("blobs/sample_{:05}_radar.bin", s.id);
        let lidar_rel = format!("blobs/sample_{:05}_lidar.bin", s.id);
        let depth_rel = format!("blobs/sample_{:05}_depth.bin", s.id);
        let radar_data = cloud_to_blob(&s.radar);
        blob::save_f32(&dir.join(&radar_rel), &[s.radar.len(), 3], &radar_data)
            .map_err(|e| blob_err(&radar_rel, e))?;
        let lidar_data = cloud_to_blob(&s.lidar);
        blob::save_f32(&dir.join(&lidar_rel), &[s.lidar.len(), 3], &lidar_data)
            .map_err(|e| blob_err(&lidar_rel, e))?;
        blob::save_f32(
            &dir.join(&depth_rel),
            &[s.depth.h, s.depth.w],
            s.depth.values(),
        )
        .map_err(|e| blob_err(&depth_rel, e))?;
        entries.push(SampleEntry {
            id: s.id,
            t_gt: s.t_gt.to_matrix4_rows().to_vec(),
            radar: BlobRef {
                sha256: blob::file_sha256(&dir.join(&radar_rel)).map_err(|e| blob_err(&radar_rel, e))?,
                path: radar_rel,
            },
            radar_points: s.radar.len(),
            lidar: BlobRef {
                sha256: blob::file_sha256(&dir.join(&lidar_rel)).map_err(|e| blob_err(&lidar_rel, e))?,
                path: lidar_rel,
            },
            lidar_points: s.lidar.len(),
            depth: BlobRef {
                sha256: blob::file_sha256(&dir.join(&depth_rel)).map_err(|e| blob_err(&depth_rel, e))?,
                path: depth_rel,
            },
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        k: config.k,
        kb: config.kb,
        cam_height: config.cam_height,
        fv_dims: config.fv_dims,
        bev_dims: config.bev_dims,
        max_depth: config.max_depth,
        noise: config.noise,
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

fn blob_err(file: &str, source: BlobError) -> DatasetError {
    DatasetError::Blob {
        file: file.to_string(),
        source,
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.display().to_string()));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Version(manifest.version));
    }
    Ok(manifest)
}

fn load_blob_checked(dir: &Path, blob_ref: &BlobRef) -> Result<(Vec<usize>, Vec<f32>), DatasetError> {
    let path = dir.join(&blob_ref.path);
    if !path.exists() {
        return Err(DatasetError::MissingFile(blob_ref.path.clone()));
    }
    let actual = blob::file_sha256(&path).map_err(|e| blob_err(&blob_ref.path, e))?;
    if actual != blob_ref.sha256 {
        return Err(DatasetError::Checksum(blob_ref.path.clone()));
    }
    blob::load_f32(&path).map_err(|e| blob_err(&blob_ref.path, e))
}

pub fn load_sample(dir: &Path, manifest: &Manifest, entry: &SampleEntry) -> Result<SampleData, DatasetError> {
    let (rd, rdata) = load_blob_checked(dir, &entry.radar)?;
    let radar = cloud_from_blob(&rd, &rdata, SensorTag::Radar, &entry.radar.path)?;
    let (ld, ldata) = load_blob_checked(dir, &entry.lidar)?;
    let lidar = cloud_from_blob(&ld, &ldata, SensorTag::Lidar, &entry.lidar.path)?;
    let (dd, ddata) = load_blob_checked(dir, &entry.depth)?;
    if dd.len() != 2 || dd[0] != manifest.fv_dims.0 || dd[1] != manifest.fv_dims.1 {
        return Err(DatasetError::Malformed(
            entry.depth.path.clone(),
            "depth dims disagree with manifest",
        ));
    }
    let mut depth = InfoMap::empty(dd[0], dd[1], ViewTag::Fv, MapSource::Image);
    for y in 0..dd[0] {
        for x in 0..dd[1] {
            let v = ddata[y * dd[1] + x];
            if v > 0.0 {
                depth.set(y, x, v);
            }
        }
    }
    if entry.t_gt.len() != 16 {
        return Err(DatasetError::Malformed(entry.depth.path.clone(), "t_gt must be 16 floats"));
    }
    let mut m = [0.0; 16];
    m.copy_from_slice(&entry.t_gt);
    Ok(SampleData {
        id: entry.id,
        t_gt: RigidTransform::from_matrix4_rows(&m),
        radar,
        lidar,
        depth,
    })
}

/// Reads every sample, verifying checksums.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SampleData>), DatasetError> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| load_sample(dir, &manifest, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, samples))
}

/// Dataset directory path helper for one named split.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
