//! Ground-truth match generation (with the noise-resistant reliability
//! filter), negative derivation, and the loss functions with their exact
//! gradients.

use crate::fusion::CalibrationStep;
use crate::geometry::{
    project_bev, project_fv, rotvec_grad, BevIntrinsics, CameraIntrinsics, PointCloud,
    RigidTransform,
};
use crate::matchnet::{MatchHeadGrads, MatchHeadOutput, TOTAL_STRIDE};
use crate::raster::ViewTag;
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("radar point at range {range:.4} m is inside the height-error sphere (delta = {delta})")]
    DegeneratePoint { range: f64, delta: f64 },
}

// ---------------------------------------------------------------------------
// noise-resistant matcher
// ---------------------------------------------------------------------------

/// Adaptive 3D box around a radar point sized by the elevation-ambiguity
/// geometry: a point at range R with allowable height error delta may really
/// sit anywhere on the arc of elevation angle phi, displacing it by
/// (dx, dz) = (R sin(theta), R cos(theta)) * (1 - cos(phi)) toward the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBox {
    /// Camera-frame box center `(X - dx/2, Y, Z - dz/2)`.
    pub center: Vector3<f64>,
    pub h_b: f64,
    pub w_b: f64,
    pub d_b: f64,
}

impl NoiseBox {
    pub fn min(&self) -> Vector3<f64> {
        self.center - Vector3::new(self.w_b * 0.5, self.h_b * 0.5, self.d_b * 0.5)
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + Vector3::new(self.w_b * 0.5, self.h_b * 0.5, self.d_b * 0.5)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn max_extent(&self) -> f64 {
        self.h_b.max(self.w_b).max(self.d_b)
    }
}

/// Box dimensions for one camera-frame radar point:
/// `h_B = 2(delta + delta_s)`, `cos(phi) = sqrt(1 - (delta/R)^2)`,
/// `w_B = |R sin(theta)| (1 - cos(phi)) + 2 delta_s`,
/// `d_B = |R cos(theta)| (1 - cos(phi)) + 2 delta_s`.
pub fn noise_box(
    radar_point: &Vector3<f64>,
    delta: f64,
    delta_s: f64,
) -> Result<NoiseBox, SupervisionError> {
    let range = radar_point.norm();
    if range <= delta {
        return Err(SupervisionError::DegeneratePoint { range, delta });
    }
    let cos_phi = (1.0 - (delta / range).powi(2)).sqrt();
    let shrink = 1.0 - cos_phi;
    // Azimuth of the point: sin/cos carry the sign of X and Z.
    let theta = radar_point.x.atan2(radar_point.z);
    let dx = range * theta.sin() * shrink;
    let dz = range * theta.cos() * shrink;
    Ok(NoiseBox {
        center: Vector3::new(
            radar_point.x - dx * 0.5,
            radar_point.y,
            radar_point.z - dz * 0.5,
        ),
        h_b: 2.0 * (delta + delta_s),
        w_b: dx.abs() + 2.0 * delta_s,
        d_b: dz.abs() + 2.0 * delta_s,
    })
}

/// Uniform-grid spatial index over a point set; cell size is chosen by the
/// caller as the largest box extent so each query touches few cells.
struct UniformGrid<'a> {
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    inv_cell: f64,
    points: &'a [Vector3<f64>],
}

impl<'a> UniformGrid<'a> {
    fn build(points: &'a [Vector3<f64>], cell_size: f64) -> Self {
        assert!(cell_size > 0.0);
        let inv_cell = 1.0 / cell_size;
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells
                .entry(Self::key(p, inv_cell))
                .or_default()
                .push(i as u32);
        }
        Self {
            cells,
            inv_cell,
            points,
        }
    }

    fn key(p: &Vector3<f64>, inv_cell: f64) -> (i64, i64, i64) {
        (
            (p.x * inv_cell).floor() as i64,
            (p.y * inv_cell).floor() as i64,
            (p.z * inv_cell).floor() as i64,
        )
    }

    /// Exact count of indexed points inside the box: scans every cell the
    /// box overlaps and tests each candidate against the box bounds.
    fn count_in_box(&self, b: &NoiseBox) -> usize {
        let lo = b.min();
        let hi = b.max();
        let lo_key = Self::key(&lo, self.inv_cell);
        let hi_key = Self::key(&hi, self.inv_cell);
        let mut count = 0;
        for cx in lo_key.0..=hi_key.0 {
            for cy in lo_key.1..=hi_key.1 {
                for cz in lo_key.2..=hi_key.2 {
                    if let Some(indices) = self.cells.get(&(cx, cy, cz)) {
                        count += indices
                            .iter()
                            .filter(|i| b.contains(&self.points[**i as usize]))
                            .count();
                    }
                }
            }
        }
        count
    }
}

/// Per-point reliability of a camera-frame radar cloud: a point is reliable
/// iff at least `tau` LiDAR points fall inside its noise box. Points closer
/// than `delta` to the sensor (degenerate boxes) are marked unreliable.
pub fn reliability_filter(
    radar_cam: &PointCloud,
    lidar_cam: &PointCloud,
    delta: f64,
    delta_s: f64,
    tau: usize,
) -> Vec<bool> {
    let boxes: Vec<Option<NoiseBox>> = radar_cam
        .points
        .iter()
        .map(|p| noise_box(p, delta, delta_s).ok())
        .collect();
    let cell = boxes
        .iter()
        .flatten()
        .map(|b| b.max_extent())
        .fold(0.0_f64, f64::max)
        .max(1e-6);
    if lidar_cam.is_empty() {
        return vec![false; radar_cam.len()];
    }
    let grid = UniformGrid::build(&lidar_cam.points, cell);
    boxes
        .iter()
        .map(|b| match b {
            Some(b) => grid.count_in_box(b) >= tau,
            None => false,
        })
        .collect()
}

/// Brute-force oracle for the reliability counts (O(radar x lidar)).
pub fn reliability_counts_bruteforce(
    radar_cam: &PointCloud,
    lidar_cam: &PointCloud,
    delta: f64,
    delta_s: f64,
) -> Vec<usize> {
    radar_cam
        .points
        .iter()
        .map(|p| match noise_box(p, delta, delta_s) {
            Ok(b) => lidar_cam.points.iter().filter(|q| b.contains(q)).count(),
            Err(_) => 0,
        })
        .collect()
}

/// Index-based reliability counts (must equal the brute-force oracle).
pub fn reliability_counts(
    radar_cam: &PointCloud,
    lidar_cam: &PointCloud,
    delta: f64,
    delta_s: f64,
) -> Vec<usize> {
    let boxes: Vec<Option<NoiseBox>> = radar_cam
        .points
        .iter()
        .map(|p| noise_box(p, delta, delta_s).ok())
        .collect();
    let cell = boxes
        .iter()
        .flatten()
        .map(|b| b.max_extent())
        .fold(0.0_f64, f64::max)
        .max(1e-6);
    if lidar_cam.is_empty() {
        return vec![0; radar_cam.len()];
    }
    let grid = UniformGrid::build(&lidar_cam.points, cell);
    boxes
        .iter()
        .map(|b| b.as_ref().map(|b| grid.count_in_box(b)).unwrap_or(0))
        .collect()
}

// ---------------------------------------------------------------------------
// ground-truth matches
// ---------------------------------------------------------------------------

/// Binary assignment ground truth for one view and iteration: positive
/// (image cell, radar cell) pairs plus the derived no-match indicator vectors
/// `N_I[i] = 1 - sum_j M[i][j]`, `N_R[j] = 1 - sum_i M[i][j]`.
#[derive(Debug, Clone)]
pub struct MatchMatrix {
    pub m: usize,
    /// Positive pairs (i = image token, j = radar token), one-to-one.
    pub pairs: Vec<(usize, usize)>,
    pub n_i: Vec<bool>,
    pub n_r: Vec<bool>,
}

impl MatchMatrix {
    pub fn from_pairs(m: usize, pairs: Vec<(usize, usize)>) -> Self {
        let mut n_i = vec![true; m];
        let mut n_r = vec![true; m];
        for (i, j) in &pairs {
            assert!(n_i[*i] && n_r[*j], "match matrix must be one-to-one");
            n_i[*i] = false;
            n_r[*j] = false;
        }
        Self { m, pairs, n_i, n_r }
    }

    pub fn positives(&self) -> usize {
        self.pairs.len()
    }

    /// Sparse (i, j) pair list for the sample debug dump.
    pub fn to_pair_list(&self) -> Vec<(usize, usize)> {
        self.pairs.clone()
    }
}

/// Projection target for match generation: the FV pinhole or the BEV
/// orthographic map.
pub enum MapProjection<'a> {
    Fv {
        k: &'a CameraIntrinsics,
        dims: (usize, usize),
    },
    Bev {
        kb: &'a BevIntrinsics,
        cam_height: f64,
        dims: (usize, usize),
    },
}

impl MapProjection<'_> {
    fn view(&self) -> ViewTag {
        match self {
            MapProjection::Fv { .. } => ViewTag::Fv,
            MapProjection::Bev { .. } => ViewTag::Bev,
        }
    }

    /// Feature cell of a camera-frame point, or None when it leaves the map
    /// (or sits behind the camera in the FV case). Also returns the depth
    /// used for collision ordering.
    fn feature_cell(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        match self {
            MapProjection::Fv { k, dims } => {
                let proj = project_fv(p, k)?;
                let (h, w) = *dims;
                let x = proj.u.round();
                let y = proj.v.round();
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return None;
                }
                let gw = w / TOTAL_STRIDE;
                let cell = (y as usize / TOTAL_STRIDE) * gw + x as usize / TOTAL_STRIDE;
                Some((cell, proj.depth))
            }
            MapProjection::Bev { kb, cam_height, dims } => {
                let proj = project_bev(p, kb, *cam_height);
                let (h, w) = *dims;
                let x = proj.u.round();
                let y = proj.v.round();
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return None;
                }
                let gw = w / TOTAL_STRIDE;
                let cell = (y as usize / TOTAL_STRIDE) * gw + x as usize / TOTAL_STRIDE;
                Some((cell, p.z))
            }
        }
    }
}

/// Builds the ground-truth match matrix for one view: each radar point is
/// projected once with the current estimate (giving its radar-map cell j)
/// and once with the true extrinsic (giving the image-map cell i where the
/// structure really is). Collisions are resolved nearest-depth-first with a
/// greedy one-to-one assignment. With `reliable_only` (FV case), points
/// without LiDAR support are excluded.
pub fn gt_matches(
    radar: &PointCloud,
    t_gt: &RigidTransform,
    t_curr: &RigidTransform,
    proj: &MapProjection,
    reliable_only: bool,
) -> MatchMatrix {
    let (gh, gw) = match proj {
        MapProjection::Fv { dims, .. } | MapProjection::Bev { dims, .. } => {
            (dims.0 / TOTAL_STRIDE, dims.1 / TOTAL_STRIDE)
        }
    };
    let m = gh * gw;
    let use_reliability = reliable_only && proj.view() == ViewTag::Fv;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (idx, p) in radar.points.iter().enumerate() {
        if use_reliability {
            if let Some(flags) = &radar.reliable {
                if !flags[idx] {
                    continue;
                }
            }
        }
        let Some((j, _)) = proj.feature_cell(&t_curr.apply(p)) else {
            continue;
        };
        let Some((i, depth_gt)) = proj.feature_cell(&t_gt.apply(p)) else {
            continue;
        };
        candidates.push((depth_gt, i, j));
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_i = vec![false; m];
    let mut used_j = vec![false; m];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if used_i[i] || used_j[j] {
            continue;
        }
        used_i[i] = true;
        used_j[j] = true;
        pairs.push((i, j));
    }
    pairs.sort_unstable();
    MatchMatrix::from_pairs(m, pairs)
}

// ---------------------------------------------------------------------------
// matching loss
// ---------------------------------------------------------------------------

/// Positive/negative balance and matching-loss weight.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            beta: 0.1,
        }
    }
}

const LOG_CLAMP: f64 = 1e-12;

pub struct MatchingLossResult {
    pub loss: f64,
    /// Per-iteration gradients w.r.t. P, sigma_I, sigma_R.
    pub grads: Vec<MatchHeadGrads>,
}

/// Negative log-likelihood of the predicted matches over all iterations of
/// one view:
/// `L = -sum_n [ lambda/|M| sum log(P_ij) M_ij
///             + (1-lambda)/(|N_I|+|N_R|) (sum log(1-sigma_I) N_I + sum log(1-sigma_R) N_R) ]`.
/// Iterations with no positives skip the positive term (and likewise for
/// negatives). Logs are clamped at 1e-12.
pub fn matching_loss(
    outputs: &[&MatchHeadOutput],
    gts: &[&MatchMatrix],
    lambda: f64,
) -> MatchingLossResult {
    assert_eq!(outputs.len(), gts.len());
    assert!((0.0..=1.0).contains(&lambda));
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, gt) in outputs.iter().zip(gts) {
        let m = gt.m;
        assert_eq!(out.p.shape(), &[m, m]);
        let mut g = MatchHeadGrads::zeros(m);
        let pos_count = gt.positives();
        if pos_count > 0 {
            let scale = lambda / pos_count as f64;
            for (i, j) in &gt.pairs {
                let p = out.p.data()[i * m + j] as f64;
                total -= scale * p.max(LOG_CLAMP).ln();
                g.dp.data_mut()[i * m + j] += (-scale / p.max(LOG_CLAMP)) as f32;
            }
        }
        let neg_count = gt.n_i.iter().filter(|v| **v).count() + gt.n_r.iter().filter(|v| **v).count();
        if neg_count > 0 {
            let scale = (1.0 - lambda) / neg_count as f64;
            for (i, is_neg) in gt.n_i.iter().enumerate() {
                if *is_neg {
                    let s = out.sigma_i.data()[i] as f64;
                    total -= scale * (1.0 - s).max(LOG_CLAMP).ln();
                    g.dsigma_i.data_mut()[i] += (scale / (1.0 - s).max(LOG_CLAMP)) as f32;
                }
            }
            for (j, is_neg) in gt.n_r.iter().enumerate() {
                if *is_neg {
                    let s = out.sigma_r.data()[j] as f64;
                    total -= scale * (1.0 - s).max(LOG_CLAMP).ln();
                    g.dsigma_r.data_mut()[j] += (scale / (1.0 - s).max(LOG_CLAMP)) as f32;
                }
            }
        }
        grads.push(g);
    }
    MatchingLossResult {
        loss: total,
        grads,
    }
}

// ---------------------------------------------------------------------------
// calibration loss
// ---------------------------------------------------------------------------

pub struct CalibrationLossResult {
    pub loss: f64,
    /// Per-iteration gradients w.r.t. (rot_vec, trans).
    pub step_grads: Vec<([f32; 3], [f32; 3])>,
}

fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() < 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

/// Weight of the translation term relative to the angular term. The geodesic
/// angle has unit gradient magnitude everywhere, while smooth-L1 gradients at
/// the R1 error scale (~0.1-0.3 m) sit near 0.1-0.3; this factor balances
/// the two so the shared trunk keeps a usable translation signal.
const TRANS_WEIGHT: f64 = 8.0;

/// Huber corner for the rotation term, radians (~3 degrees). Below it the
/// angular term turns quadratic so its gradient fades once rotation is
/// nearly solved, instead of drowning the much smaller translation signal.
const ROT_HUBER: f64 = 0.05;

/// Huber of the geodesic angle and its derivative w.r.t. the angle.
fn rot_huber(theta: f64) -> (f64, f64) {
    if theta < ROT_HUBER {
        (theta * theta / (2.0 * ROT_HUBER), theta / ROT_HUBER)
    } else {
        (theta - ROT_HUBER / 2.0, 1.0)
    }
}

/// Iteration-weighted pose loss against the total residual transform
/// `t_residual = T_init^-1 T_gt`: the cumulative predicted correction after
/// n steps is compared to the full residual with weight `n / N`, so later
/// iterations are pushed to complete the correction while early ones may be
/// partial. Rotation uses geodesic angular distance, translation a smooth-L1
/// sum. This stands in for an external decoder's loss and is isolated here
/// so it can be swapped.
pub fn calibration_loss(
    steps: &[CalibrationStep],
    t_residual: &RigidTransform,
) -> CalibrationLossResult {
    let n = steps.len();
    assert!(n >= 1);
    // Forward cumulative composition.
    let rots: Vec<Matrix3<f64>> = steps.iter().map(|s| s.rot_vec.to_matrix()).collect();
    let mut r_cum = Vec::with_capacity(n + 1);
    let mut t_cum = Vec::with_capacity(n + 1);
    r_cum.push(Matrix3::identity());
    t_cum.push(Vector3::zeros());
    for (rot, step) in rots.iter().zip(steps) {
        let r_prev: &Matrix3<f64> = r_cum.last().unwrap();
        let t_prev: &Vector3<f64> = t_cum.last().unwrap();
        t_cum.push(r_prev * step.trans + t_prev);
        r_cum.push(r_prev * rot);
    }

    // Loss terms and gradients w.r.t. each cumulative state.
    let mut loss = 0.0;
    let mut d_r_cum = vec![Matrix3::zeros(); n + 1];
    let mut d_t_cum = vec![Vector3::zeros(); n + 1];
    for k in 1..=n {
        let w = k as f64 / n as f64;
        let cos_angle = ((r_cum[k].transpose() * t_residual.rotation).trace() - 1.0) * 0.5;
        let clamped = cos_angle.clamp(-1.0, 1.0);
        let theta = clamped.acos();
        let (rot_term, d_theta) = rot_huber(theta);
        loss += w * rot_term;
        let denom = (1.0 - clamped * clamped).sqrt().max(1e-6);
        d_r_cum[k] += t_residual.rotation * (-w * d_theta / (2.0 * denom));
        for axis in 0..3 {
            let (l, dl) = smooth_l1(t_cum[k][axis] - t_residual.translation[axis]);
            loss += w * TRANS_WEIGHT * l;
            d_t_cum[k][axis] += w * TRANS_WEIGHT * dl;
        }
    }

    // Reverse accumulation through the composition chain.
    let mut step_grads = vec![([0.0f32; 3], [0.0f32; 3]); n];
    for k in (1..=n).rev() {
        let d_r = d_r_cum[k];
        let d_t = d_t_cum[k];
        // R_cum[k] = R_cum[k-1] * R_k; t_cum[k] = R_cum[k-1] * t_k + t_cum[k-1].
        d_r_cum[k - 1] += d_r * rots[k - 1].transpose() + d_t * steps[k - 1].trans.transpose();
        d_t_cum[k - 1] += d_t;
        let d_rk = r_cum[k - 1].transpose() * d_r;
        let d_tk = r_cum[k - 1].transpose() * d_t;
        let d_v = rotvec_grad(&steps[k - 1].rot_vec.0, &d_rk);
        step_grads[k - 1] = (
            [d_v.x as f32, d_v.y as f32, d_v.z as f32],
            [d_tk.x as f32, d_tk.y as f32, d_tk.z as f32],
        );
    }

    CalibrationLossResult { loss, step_grads }
}

/// `L_total = L_calib + beta * L_matching`.
pub fn total_loss(l_calib: f64, l_matching: f64, beta: f64) -> f64 {
    assert!(beta >= 0.0);
    l_calib + beta * l_matching
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RotationVector, SensorTag};
    use crate::kernels::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_height_is_constant_in_range() {
        // h_B = 2 (delta + delta_s) = 3.0 m with the reference constants.
        for p in [
            Vector3::new(3.0, 0.2, 4.0),
            Vector3::new(-10.0, -1.0, 30.0),
            Vector3::new(0.0, 0.0, 2.0),
        ] {
            let b = noise_box(&p, 1.0, 0.5).unwrap();
            assert_abs_diff_eq!(b.h_b, 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn box_extents_match_scalar_arithmetic() {
        // R = 10, theta = 30 degrees, delta = 1, delta_s = 0.5.
        let theta = 30.0_f64.to_radians();
        let p = Vector3::new(10.0 * theta.sin(), 0.0, 10.0 * theta.cos());
        let b = noise_box(&p, 1.0, 0.5).unwrap();
        let cos_phi = (1.0_f64 - 0.01).sqrt();
        assert_abs_diff_eq!(cos_phi, 0.994987437106620, epsilon = 1e-12);
        let expected_w = 10.0 * theta.sin() * (1.0 - cos_phi) + 1.0;
        let expected_d = 10.0 * theta.cos() * (1.0 - cos_phi) + 1.0;
        assert_abs_diff_eq!(b.w_b, expected_w, epsilon = 1e-9);
        assert_abs_diff_eq!(b.d_b, expected_d, epsilon = 1e-9);
        assert_abs_diff_eq!(expected_w, 1.0250628144669, epsilon = 1e-9);
        // Center shifts toward the sensor by half the ambiguity offset.
        assert!(b.center.z < p.z);
        assert!(b.center.x < p.x);
        assert_abs_diff_eq!(b.center.y, p.y, epsilon = 1e-15);
    }

    #[test]
    fn box_degenerate_inside_delta_sphere() {
        let p = Vector3::new(0.3, 0.0, 0.4);
        assert!(matches!(
            noise_box(&p, 1.0, 0.5),
            Err(SupervisionError::DegeneratePoint { .. })
        ));
    }

    #[test]
    fn reliability_empty_lidar_all_unreliable() {
        let radar = PointCloud::new(
            vec![Vector3::new(1.0, 0.0, 10.0), Vector3::new(-2.0, 0.5, 8.0)],
            SensorTag::Radar,
        );
        let lidar = PointCloud::new(vec![], SensorTag::Lidar);
        assert_eq!(reliability_filter(&radar, &lidar, 1.0, 0.5, 3), vec![false, false]);
    }

    #[test]
    fn reliability_colocated_lidar_is_reliable() {
        let p = Vector3::new(2.0, 0.0, 12.0);
        let radar = PointCloud::new(vec![p], SensorTag::Radar);
        let lidar = PointCloud::new(
            vec![
                p + Vector3::new(0.05, 0.1, -0.02),
                p + Vector3::new(-0.1, -0.4, 0.1),
                p + Vector3::new(0.0, 0.8, 0.0),
            ],
            SensorTag::Lidar,
        );
        assert_eq!(reliability_filter(&radar, &lidar, 1.0, 0.5, 3), vec![true]);
        // tau above the available support flips it.
        assert_eq!(reliability_filter(&radar, &lidar, 1.0, 0.5, 4), vec![false]);
    }

    #[test]
    fn grid_counts_equal_bruteforce_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let radar_pts: Vec<Vector3<f64>> = (0..120)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(2.0..40.0),
                    )
                })
                .collect();
            let lidar_pts: Vec<Vector3<f64>> = (0..3000)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(2.0..40.0),
                    )
                })
                .collect();
            let radar = PointCloud::new(radar_pts, SensorTag::Radar);
            let lidar = PointCloud::new(lidar_pts, SensorTag::Lidar);
            assert_eq!(
                reliability_counts(&radar, &lidar, 1.0, 0.5),
                reliability_counts_bruteforce(&radar, &lidar, 1.0, 0.5)
            );
        }
    }

    fn fv_proj(k: &CameraIntrinsics) -> MapProjection<'_> {
        MapProjection::Fv {
            k,
            dims: (48, 96),
        }
    }

    #[test]
    fn gt_matches_diagonal_when_estimates_agree() {
        let k = CameraIntrinsics::new(48.0, 48.0, 48.0, 24.0);
        let radar = PointCloud::new(
            vec![
                Vector3::new(0.0, 0.0, 10.0),
                Vector3::new(3.0, 1.0, 15.0),
                Vector3::new(-6.0, -2.0, 22.0),
            ],
            SensorTag::Radar,
        );
        let t = crate::geometry::sample_miscalibration(5.0, 0.2, 3);
        let matches = gt_matches(&radar, &t, &t, &fv_proj(&k), false);
        assert!(!matches.pairs.is_empty());
        for (i, j) in &matches.pairs {
            assert_eq!(i, j);
        }
    }

    #[test]
    fn negatives_derive_from_match_rows() {
        // M = [[1,0],[0,0]] -> N_I = [0,1], N_R = [0,1].
        let m = MatchMatrix::from_pairs(2, vec![(0, 0)]);
        assert_eq!(m.n_i, vec![false, true]);
        assert_eq!(m.n_r, vec![false, true]);
    }

    #[test]
    fn single_point_lands_in_hand_computed_cell() {
        let k = CameraIntrinsics::new(48.0, 48.0, 48.0, 24.0);
        // Point (6, 2, 12): u = 48*6/12 + 48 = 72, v = 48*2/12 + 24 = 32.
        // Cell = (32/8) * (96/8) + 72/8 = 4*12 + 9 = 57.
        let radar = PointCloud::new(vec![Vector3::new(6.0, 2.0, 12.0)], SensorTag::Radar);
        let id = RigidTransform::identity();
        let matches = gt_matches(&radar, &id, &id, &fv_proj(&k), false);
        assert_eq!(matches.pairs, vec![(57, 57)]);
    }

    #[test]
    fn unreliable_points_excluded_in_fv() {
        let k = CameraIntrinsics::new(48.0, 48.0, 48.0, 24.0);
        let mut radar = PointCloud::new(
            vec![Vector3::new(0.0, 0.0, 10.0), Vector3::new(3.0, 1.0, 15.0)],
            SensorTag::Radar,
        );
        radar.reliable = Some(vec![true, false]);
        let id = RigidTransform::identity();
        let matches = gt_matches(&radar, &id, &id, &fv_proj(&k), true);
        assert_eq!(matches.pairs.len(), 1);
        let all = gt_matches(&radar, &id, &id, &fv_proj(&k), false);
        assert_eq!(all.pairs.len(), 2);
    }

    fn perfect_output(m: usize, pairs: &[(usize, usize)]) -> MatchHeadOutput {
        let mut p = Tensor::zeros(&[m, m]);
        let mut sigma_i = Tensor::zeros(&[m]);
        let mut sigma_r = Tensor::zeros(&[m]);
        for (i, j) in pairs {
            p.data_mut()[i * m + j] = 1.0;
            sigma_i.data_mut()[*i] = 1.0;
            sigma_r.data_mut()[*j] = 1.0;
        }
        MatchHeadOutput {
            p,
            sigma_i,
            sigma_r,
            s: Tensor::zeros(&[m, m]),
        }
    }

    #[test]
    fn matching_loss_zero_at_perfect_prediction() {
        let gt = MatchMatrix::from_pairs(3, vec![(0, 1), (2, 0)]);
        let out = perfect_output(3, &gt.pairs);
        let result = matching_loss(&[&out], &[&gt], 0.75);
        assert_abs_diff_eq!(result.loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matching_loss_lambda_one_drops_negative_term() {
        let gt = MatchMatrix::from_pairs(2, vec![(0, 0)]);
        let mut out = perfect_output(2, &gt.pairs);
        // Saturate the negative sigmas; with lambda = 1 they must not count.
        out.sigma_i.data_mut()[1] = 0.9999;
        out.sigma_r.data_mut()[1] = 0.9999;
        let full = matching_loss(&[&out], &[&gt], 1.0);
        assert_abs_diff_eq!(full.loss, 0.0, epsilon = 1e-12);
        let mixed = matching_loss(&[&out], &[&gt], 0.5);
        assert!(mixed.loss > 1.0);
    }

    #[test]
    fn matching_loss_single_positive_closed_form() {
        // One positive with P = e^-1 and lambda = 1: L = -ln(e^-1) = 1.
        let gt = MatchMatrix::from_pairs(1, vec![(0, 0)]);
        let mut out = perfect_output(1, &gt.pairs);
        out.p.data_mut()[0] = (-1.0f32).exp();
        let result = matching_loss(&[&out], &[&gt], 1.0);
        assert_abs_diff_eq!(result.loss, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn matching_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 4;
        let gt = MatchMatrix::from_pairs(m, vec![(0, 2), (3, 1)]);
        let mut out = perfect_output(m, &gt.pairs);
        for v in out.p.data_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        for v in out.sigma_i.data_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        for v in out.sigma_r.data_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        let lambda = 0.75;
        let result = matching_loss(&[&out], &[&gt], lambda);
        let eps = 1e-3f32;
        for idx in 0..m * m {
            let mut plus = out.clone();
            plus.p.data_mut()[idx] += eps;
            let mut minus = out.clone();
            minus.p.data_mut()[idx] -= eps;
            let numeric = (matching_loss(&[&plus], &[&gt], lambda).loss
                - matching_loss(&[&minus], &[&gt], lambda).loss)
                / (2.0 * eps as f64);
            assert_abs_diff_eq!(result.grads[0].dp.data()[idx] as f64, numeric, epsilon = 1e-3);
        }
        for idx in 0..m {
            let mut plus = out.clone();
            plus.sigma_i.data_mut()[idx] += eps;
            let mut minus = out.clone();
            minus.sigma_i.data_mut()[idx] -= eps;
            let numeric = (matching_loss(&[&plus], &[&gt], lambda).loss
                - matching_loss(&[&minus], &[&gt], lambda).loss)
                / (2.0 * eps as f64);
            assert_abs_diff_eq!(
                result.grads[0].dsigma_i.data()[idx] as f64,
                numeric,
                epsilon = 1e-3
            );
        }
    }

    fn steps_for_test() -> Vec<CalibrationStep> {
        vec![
            CalibrationStep {
                rot_vec: RotationVector(Vector3::new(0.05, -0.02, 0.1)),
                trans: Vector3::new(0.1, 0.05, -0.2),
            },
            CalibrationStep {
                rot_vec: RotationVector(Vector3::new(-0.03, 0.07, 0.01)),
                trans: Vector3::new(-0.05, 0.0, 0.12),
            },
            CalibrationStep {
                rot_vec: RotationVector(Vector3::new(0.02, 0.0, -0.04)),
                trans: Vector3::new(0.02, -0.03, 0.0),
            },
        ]
    }

    #[test]
    fn calibration_loss_zero_when_exact() {
        // One step exactly equal to the residual: every cumulative state at
        // full weight matches, partial ones are weighted but also exact for
        // n = 1.
        let residual = RigidTransform::new(
            RotationVector(Vector3::new(0.1, -0.05, 0.2)).to_matrix(),
            Vector3::new(0.2, -0.1, 0.05),
        );
        let steps = vec![CalibrationStep {
            rot_vec: RotationVector(Vector3::new(0.1, -0.05, 0.2)),
            trans: Vector3::new(0.2, -0.1, 0.05),
        }];
        let result = calibration_loss(&steps, &residual);
        assert_abs_diff_eq!(result.loss, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn calibration_loss_zero_identity_vs_identity() {
        let steps = vec![
            CalibrationStep {
                rot_vec: RotationVector::zero(),
                trans: Vector3::zeros(),
            };
            3
        ];
        let result = calibration_loss(&steps, &RigidTransform::identity());
        assert_abs_diff_eq!(result.loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_loss_single_iteration_is_plain_pose_loss() {
        let residual = RigidTransform::new(
            RotationVector(Vector3::new(0.0, 0.3, 0.0)).to_matrix(),
            Vector3::new(0.5, 0.0, 0.0),
        );
        let steps = vec![CalibrationStep {
            rot_vec: RotationVector::zero(),
            trans: Vector3::zeros(),
        }];
        let result = calibration_loss(&steps, &residual);
        // w_1 = 1: Huberized angular distance of 0.3 plus weighted smooth-L1
        // of 0.5.
        assert_abs_diff_eq!(
            result.loss,
            (0.3 - ROT_HUBER / 2.0) + TRANS_WEIGHT * 0.125,
            epsilon = 1e-9
        );
    }

    #[test]
    fn calibration_loss_gradients_match_finite_differences() {
        let residual = RigidTransform::new(
            RotationVector(Vector3::new(0.2, 0.1, -0.3)).to_matrix(),
            Vector3::new(0.3, -0.2, 0.15),
        );
        let steps = steps_for_test();
        let analytic = calibration_loss(&steps, &residual);
        let eps = 1e-6;
        for si in 0..steps.len() {
            for axis in 0..3 {
                let mut plus = steps.clone();
                plus[si].rot_vec.0[axis] += eps;
                let mut minus = steps.clone();
                minus[si].rot_vec.0[axis] -= eps;
                let numeric = (calibration_loss(&plus, &residual).loss
                    - calibration_loss(&minus, &residual).loss)
                    / (2.0 * eps);
                assert_abs_diff_eq!(analytic.step_grads[si].0[axis] as f64, numeric, epsilon = 1e-4);

                let mut plus = steps.clone();
                plus[si].trans[axis] += eps;
                let mut minus = steps.clone();
                minus[si].trans[axis] -= eps;
                let numeric = (calibration_loss(&plus, &residual).loss
                    - calibration_loss(&minus, &residual).loss)
                    / (2.0 * eps);
                assert_abs_diff_eq!(analytic.step_grads[si].1[axis] as f64, numeric, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_loss(1.0, 2.0, 0.0), 1.0);
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 0.1), 1.2, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn box_extents_monotone_in_delta_and_slack(
            x in -15.0f64..15.0,
            z in 5.0f64..40.0,
            delta in 0.2f64..2.0,
            slack in 0.0f64..1.0,
        ) {
            let p = Vector3::new(x, 0.3, z);
            prop_assume!(p.norm() > 2.5);
            let b = noise_box(&p, delta, slack).unwrap();
            let b_delta = noise_box(&p, delta + 0.2, slack).unwrap();
            let b_slack = noise_box(&p, delta, slack + 0.2).unwrap();
            prop_assert!(b_delta.h_b >= b.h_b);
            prop_assert!(b_delta.w_b >= b.w_b - 1e-12);
            prop_assert!(b_delta.d_b >= b.d_b - 1e-12);
            prop_assert!(b_slack.h_b >= b.h_b);
            prop_assert!(b_slack.w_b >= b.w_b);
            prop_assert!(b_slack.d_b >= b.d_b);
        }

        #[test]
        fn matching_loss_nonnegative(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 5;
            let gt = MatchMatrix::from_pairs(m, vec![(1, 3), (4, 0)]);
            let mut out = perfect_output(m, &gt.pairs);
            for v in out.p.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            for v in out.sigma_i.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            for v in out.sigma_r.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            prop_assert!(matching_loss(&[&out], &[&gt], 0.75).loss >= 0.0);
        }
    }
}
