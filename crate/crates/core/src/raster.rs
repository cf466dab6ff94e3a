//! Rasterization of point clouds and depth images into the four
//! dual-perspective information maps that feed the network.

use crate::blob::{self, BlobError};
use crate::geometry::{
    project_bev, project_fv, unproject_depth, BevIntrinsics, CameraIntrinsics, PointCloud,
    RigidTransform, SensorTag,
};
use crate::kernels::Tensor;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    Fv,
    Bev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Radar,
    Image,
}

/// H x W scalar raster (FV depth map or BEV height map) with an occupancy
/// mask. `mask[i] == false` implies `values[i] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMap {
    pub h: usize,
    pub w: usize,
    values: Vec<f32>,
    mask: Vec<bool>,
    pub view: ViewTag,
    pub source: MapSource,
}

impl InfoMap {
    pub fn empty(h: usize, w: usize, view: ViewTag, source: MapSource) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
            mask: vec![false; h * w],
            view,
            source,
        }
    }

    pub fn value(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    pub fn occupied(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set(&mut self, y: usize, x: usize, value: f32) {
        self.values[y * self.w + x] = value;
        self.mask[y * self.w + x] = true;
    }

    pub fn occupied_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied_count() as f64 / (self.h * self.w) as f64
    }

    /// `[1, h, w]` network input; `scale` divides values when provided.
    pub fn to_tensor(&self, scale: Option<f32>) -> Tensor {
        let inv = scale.map(|s| 1.0 / s).unwrap_or(1.0);
        Tensor::from_vec(
            &[1, self.h, self.w],
            self.values.iter().map(|v| v * inv).collect(),
        )
    }

    /// Raw float32 blob plus the mask as a u8 blob next to it.
    pub fn export_blob(&self, path: &Path) -> Result<(), BlobError> {
        blob::save_f32(path, &[self.h, self.w], &self.values)
    }

    /// PGM-style 8-bit grayscale, normalized by the map maximum.
    pub fn export_pgm(&self, path: &Path) -> std::io::Result<()> {
        write_pgm(path, self.h, self.w, &self.values, &[])
    }
}

/// Binary P5 PGM with optional marker pixels painted white.
pub fn write_pgm(
    path: &Path,
    h: usize,
    w: usize,
    values: &[f32],
    markers: &[(usize, usize)],
) -> std::io::Result<()> {
    use std::io::Write;
    let max = values.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let mut bytes = vec![0u8; h * w];
    for (b, v) in bytes.iter_mut().zip(values) {
        *b = ((v / max).clamp(0.0, 1.0) * 254.0) as u8;
    }
    for (y, x) in markers {
        if *y < h && *x < w {
            bytes[y * w + x] = 255;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(&bytes)?;
    f.flush()
}

/// Points that never reached the raster and why.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub dropped_behind: usize,
    pub dropped_out_of_frame: usize,
}

/// Transforms the cloud by `t`, projects through the pinhole, splats each
/// point to the nearest pixel. Collisions keep the smaller depth (z-buffer);
/// behind-camera and out-of-frame points are dropped.
pub fn rasterize_fv(
    cloud: &PointCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    h: usize,
    w: usize,
) -> (InfoMap, RasterStats) {
    let mut map = InfoMap::empty(h, w, ViewTag::Fv, MapSource::Radar);
    let mut stats = RasterStats::default();
    for p in &cloud.points {
        let pc = t.apply(p);
        let Some(proj) = project_fv(&pc, k) else {
            stats.dropped_behind += 1;
            continue;
        };
        let Some((x, y)) = splat(proj.u, proj.v, w, h) else {
            stats.dropped_out_of_frame += 1;
            continue;
        };
        let depth = proj.depth as f32;
        if !map.occupied(y, x) || depth < map.value(y, x) {
            map.set(y, x, depth);
        }
    }
    (map, stats)
}

/// As [`rasterize_fv`] but through the orthographic BEV projection;
/// collisions keep the larger height value (tallest structure wins).
pub fn rasterize_bev(
    cloud: &PointCloud,
    t: &RigidTransform,
    k: &BevIntrinsics,
    cam_height: f64,
    h: usize,
    w: usize,
) -> (InfoMap, RasterStats) {
    let mut map = InfoMap::empty(h, w, ViewTag::Bev, MapSource::Radar);
    let mut stats = RasterStats::default();
    for p in &cloud.points {
        let pc = t.apply(p);
        let proj = project_bev(&pc, k, cam_height);
        let Some((x, y)) = splat(proj.u, proj.v, w, h) else {
            stats.dropped_out_of_frame += 1;
            continue;
        };
        let value = proj.value as f32;
        if !map.occupied(y, x) || value > map.value(y, x) {
            map.set(y, x, value);
        }
    }
    (map, stats)
}

/// Lifts every occupied depth pixel into a pseudo point cloud and rasterizes
/// it top-down with the identity transform.
pub fn depth_to_pseudo_bev(
    depth: &InfoMap,
    k: &CameraIntrinsics,
    kb: &BevIntrinsics,
    cam_height: f64,
    h: usize,
    w: usize,
) -> (InfoMap, RasterStats) {
    assert_eq!(depth.view, ViewTag::Fv, "pseudo-BEV input must be an FV map");
    let cloud = depth_to_pseudo_cloud(depth, k);
    let (mut map, stats) = rasterize_bev(&cloud, &RigidTransform::identity(), kb, cam_height, h, w);
    map.source = MapSource::Image;
    (map, stats)
}

/// Pseudo point cloud from a depth map, one point per occupied pixel.
pub fn depth_to_pseudo_cloud(depth: &InfoMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::with_capacity(depth.occupied_count());
    for y in 0..depth.h {
        for x in 0..depth.w {
            if !depth.occupied(y, x) {
                continue;
            }
            let d = depth.value(y, x) as f64;
            if let Some(p) = unproject_depth(x as f64, y as f64, d, k) {
                points.push(p);
            }
        }
    }
    PointCloud::new(points, SensorTag::Pseudo)
}

fn splat(u: f64, v: f64, w: usize, h: usize) -> Option<(usize, usize)> {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

/// Renders a radar cloud onto the four maps for one calibration state.
/// The image-side maps depend only on the depth map, so callers cache them
/// across iterations; helpers here keep the code paths identical.
pub fn radar_fv_bev(
    radar: &PointCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
    kb: &BevIntrinsics,
    cam_height: f64,
    fv_dims: (usize, usize),
    bev_dims: (usize, usize),
) -> (InfoMap, InfoMap) {
    let (fv, _) = rasterize_fv(radar, t, k, fv_dims.0, fv_dims.1);
    let (bev, _) = rasterize_bev(radar, t, kb, cam_height, bev_dims.0, bev_dims.1);
    (fv, bev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(48.0, 48.0, 48.0, 24.0)
    }

    fn test_kb() -> BevIntrinsics {
        BevIntrinsics::new(2.0, 2.0, 48.0, 0.0)
    }

    #[test]
    fn empty_cloud_gives_zero_map() {
        let cloud = PointCloud::new(vec![], SensorTag::Radar);
        let (map, stats) = rasterize_fv(&cloud, &RigidTransform::identity(), &test_k(), 48, 96);
        assert_eq!(map.occupied_count(), 0);
        assert!(map.values().iter().all(|v| *v == 0.0));
        assert_eq!(stats, RasterStats::default());
    }

    #[test]
    fn optical_axis_point_hits_center() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 10.0)], SensorTag::Radar);
        let (map, _) = rasterize_fv(&cloud, &RigidTransform::identity(), &test_k(), 48, 96);
        assert_eq!(map.occupied_count(), 1);
        assert_eq!(map.value(24, 48), 10.0);
    }

    #[test]
    fn fv_collision_keeps_smaller_depth() {
        // Both orders must agree with the exhaustive two-point oracle: min.
        let a = Vector3::new(0.0, 0.0, 5.0);
        let b = Vector3::new(0.0, 0.0, 9.0);
        for pts in [vec![a, b], vec![b, a]] {
            let cloud = PointCloud::new(pts, SensorTag::Radar);
            let (map, _) = rasterize_fv(&cloud, &RigidTransform::identity(), &test_k(), 48, 96);
            assert_eq!(map.occupied_count(), 1);
            assert_eq!(map.value(24, 48), 5.0);
        }
    }

    #[test]
    fn behind_camera_points_dropped() {
        let cloud = PointCloud::new(
            vec![Vector3::new(0.0, 0.0, -3.0), Vector3::new(0.0, 0.0, 8.0)],
            SensorTag::Radar,
        );
        let (map, stats) = rasterize_fv(&cloud, &RigidTransform::identity(), &test_k(), 48, 96);
        assert_eq!(stats.dropped_behind, 1);
        assert_eq!(map.occupied_count(), 1);
    }

    #[test]
    fn constant_height_cloud_shares_value() {
        // Points on the camera-height plane (Y = 0) all record cam_height.
        let pts = (0..20)
            .map(|i| Vector3::new(-5.0 + i as f64 * 0.5, 0.0, 4.0 + i as f64))
            .collect();
        let cloud = PointCloud::new(pts, SensorTag::Radar);
        let (map, _) =
            rasterize_bev(&cloud, &RigidTransform::identity(), &test_kb(), 1.5, 96, 96);
        assert!(map.occupied_count() > 0);
        for y in 0..96 {
            for x in 0..96 {
                if map.occupied(y, x) {
                    assert_eq!(map.value(y, x), 1.5);
                }
            }
        }
    }

    #[test]
    fn bev_pillar_keeps_max_height() {
        // Vertical pillar at one (X, Z); brute-force max over its heights.
        let heights = [-1.5, -0.7, 0.3, 1.1, 0.9];
        let pts: Vec<_> = heights
            .iter()
            .map(|y| Vector3::new(3.0, *y, 10.0))
            .collect();
        let expected = heights
            .iter()
            .map(|y| y + 1.5)
            .fold(f64::NEG_INFINITY, f64::max) as f32;
        let cloud = PointCloud::new(pts, SensorTag::Radar);
        let (map, _) =
            rasterize_bev(&cloud, &RigidTransform::identity(), &test_kb(), 1.5, 96, 96);
        assert_eq!(map.occupied_count(), 1);
        assert_eq!(map.value(20, 54), expected);
    }

    #[test]
    fn bev_out_of_extent_increments_drop_counter() {
        let cloud = PointCloud::new(vec![Vector3::new(100.0, 0.0, 10.0)], SensorTag::Radar);
        let (map, stats) =
            rasterize_bev(&cloud, &RigidTransform::identity(), &test_kb(), 1.5, 96, 96);
        assert_eq!(map.occupied_count(), 0);
        assert_eq!(stats.dropped_out_of_frame, 1);
    }

    #[test]
    fn pseudo_bev_wall_occupies_single_row() {
        // Fronto-parallel wall at Z = 10 spanning the image: every pixel
        // unprojects to Z = 10, so exactly one BEV row is occupied.
        let mut depth = InfoMap::empty(48, 96, ViewTag::Fv, MapSource::Image);
        for y in 0..48 {
            for x in 0..96 {
                depth.set(y, x, 10.0);
            }
        }
        let (bev, _) = depth_to_pseudo_bev(&depth, &test_k(), &test_kb(), 1.5, 96, 96);
        let expected_row = (2.0f64 * 10.0 + 0.0).round() as usize;
        for y in 0..96 {
            let occupied = (0..96).any(|x| bev.occupied(y, x));
            assert_eq!(occupied, y == expected_row, "row {y}");
        }
        assert_eq!(bev.source, MapSource::Image);
    }

    #[test]
    fn pseudo_bev_empty_depth_is_empty() {
        let depth = InfoMap::empty(48, 96, ViewTag::Fv, MapSource::Image);
        let (bev, _) = depth_to_pseudo_bev(&depth, &test_k(), &test_kb(), 1.5, 96, 96);
        assert_eq!(bev.occupied_count(), 0);
    }

    #[test]
    fn pseudo_bev_single_pixel_matches_unprojection() {
        let mut depth = InfoMap::empty(48, 96, ViewTag::Fv, MapSource::Image);
        depth.set(10, 30, 12.0);
        let k = test_k();
        let (bev, _) = depth_to_pseudo_bev(&depth, &k, &test_kb(), 1.5, 96, 96);
        assert_eq!(bev.occupied_count(), 1);
        let p = unproject_depth(30.0, 10.0, 12.0, &k).unwrap();
        let proj = project_bev(&p, &test_kb(), 1.5);
        let x = proj.u.round() as usize;
        let y = proj.v.round() as usize;
        assert!(bev.occupied(y, x));
        assert!((bev.value(y, x) as f64 - (p.y + 1.5)).abs() < 1e-6);
    }

    #[test]
    fn occupied_cells_bounded_by_point_count() {
        let t = crate::geometry::sample_miscalibration(10.0, 0.25, 3);
        let pts: Vec<_> = (0..200)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.37).sin() * 8.0, (f * 0.11).cos(), 5.0 + (f % 30.0))
            })
            .collect();
        let cloud = PointCloud::new(pts, SensorTag::Radar);
        let (map, _) = rasterize_fv(&cloud, &t, &test_k(), 48, 96);
        assert!(map.occupied_count() <= cloud.len());
    }

    proptest! {
        #[test]
        fn raster_is_order_independent(seed in 0u64..200) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pts: Vec<_> = (0..60)
                .map(|i| {
                    let f = i as f64;
                    Vector3::new((f * 0.7).sin() * 10.0, (f * 0.3).sin() * 2.0, 3.0 + (f % 25.0))
                })
                .collect();
            let mut shuffled = pts.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let k = test_k();
            let kb = test_kb();
            let a = rasterize_fv(&PointCloud::new(pts.clone(), SensorTag::Radar),
                &RigidTransform::identity(), &k, 48, 96).0;
            let b = rasterize_fv(&PointCloud::new(shuffled.clone(), SensorTag::Radar),
                &RigidTransform::identity(), &k, 48, 96).0;
            prop_assert_eq!(a.values(), b.values());
            prop_assert_eq!(a.mask(), b.mask());
            let c = rasterize_bev(&PointCloud::new(pts, SensorTag::Radar),
                &RigidTransform::identity(), &kb, 1.5, 96, 96).0;
            let d = rasterize_bev(&PointCloud::new(shuffled, SensorTag::Radar),
                &RigidTransform::identity(), &kb, 1.5, 96, 96).0;
            prop_assert_eq!(c.values(), d.values());
        }
    }
}
