//! SE(3) transforms, rotation representations, pinhole/orthographic
//! projections, miscalibration sampling, and calibration error metrics.
//!
//! Conventions used throughout the crate:
//! - Camera frame: X right, Y up, Z forward (depth). The ground plane sits at
//!   `Y = -camera_height`, so `Y + camera_height` is height above ground.
//! - Euler angles are intrinsic X-Y-Z: `R = Rx(roll) * Ry(pitch) * Rz(yaw)`.
//! - All rotations are stored as 3x3 matrices, all angles in radians.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Depth cutoff below which a point counts as behind the camera.
pub const EPS_DEPTH: f64 = 1e-3;

/// Sensor that produced a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorTag {
    Radar,
    Lidar,
    Pseudo,
}

/// A set of 3D points in a single sensor frame.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub sensor: SensorTag,
    /// Per-point reliability flags, filled in by the noise-resistant filter.
    pub reliable: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, sensor: SensorTag) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        Self {
            points,
            sensor,
            reliable: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid transform in SE(3): `p' = R * p + t`.
///
/// This is the quantity being calibrated (radar frame -> camera frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition such that `a.compose(b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r_inv = self.rotation.transpose();
        RigidTransform {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// Deviation from orthonormality, `max |R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Projects the rotation back onto SO(3) via a few polar-decomposition
    /// Newton steps. Used after long compose chains to keep orthonormality
    /// within 1e-9.
    pub fn renormalized(&self) -> RigidTransform {
        let mut r = self.rotation;
        for _ in 0..4 {
            let r_inv_t = r
                .try_inverse()
                .map(|m| m.transpose())
                .unwrap_or_else(Matrix3::identity);
            r = (r + r_inv_t) * 0.5;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major 4x4 homogeneous matrix, the manifest serialization format.
    pub fn to_matrix4_rows(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.rotation[(i, j)];
            }
            out[i * 4 + 3] = self.translation[i];
        }
        out[15] = 1.0;
        out
    }

    pub fn from_matrix4_rows(m: &[f64; 16]) -> Self {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self {
            rotation,
            translation,
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Axis-angle rotation: direction is the axis, magnitude the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    /// Rodrigues formula.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let theta = self.0.norm();
        if theta < 1e-12 {
            return Matrix3::identity() + skew(&self.0);
        }
        let axis = self.0 / theta;
        let k = skew(&axis);
        Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
    }

    /// Log map, angle in [0, pi].
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if theta < 1e-10 {
            // First-order: R ~ I + [v]x
            return Self(Vector3::new(
                (r[(2, 1)] - r[(1, 2)]) * 0.5,
                (r[(0, 2)] - r[(2, 0)]) * 0.5,
                (r[(1, 0)] - r[(0, 1)]) * 0.5,
            ));
        }
        if (std::f64::consts::PI - theta) < 1e-6 {
            // Near pi the antisymmetric part vanishes; use the symmetric part.
            let b = (r + Matrix3::identity()) * 0.5;
            let axis = Vector3::new(b[(0, 0)].sqrt(), b[(1, 1)].sqrt(), b[(2, 2)].sqrt());
            // Fix signs from the off-diagonal terms, anchored on the largest component.
            let mut a = axis;
            let k = a.iamax();
            if a[k] > 0.0 {
                let idx = [(0usize, 1usize), (0, 2), (1, 2)];
                for &(i, j) in &idx {
                    let s = b[(i, j)];
                    if i == k {
                        a[j] = a[j].abs() * s.signum() * a[k].signum();
                    } else if j == k {
                        a[i] = a[i].abs() * s.signum() * a[k].signum();
                    }
                }
            }
            let n = a.norm();
            if n > 1e-12 {
                a /= n;
            }
            return Self(a * theta);
        }
        let v = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        Self(v * (theta / (2.0 * theta.sin())))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Euler angles in the intrinsic X-Y-Z convention:
/// `R = Rx(roll) * Ry(pitch) * Rz(yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (sa, ca) = self.roll.sin_cos();
        let (sb, cb) = self.pitch.sin_cos();
        let (sc, cc) = self.yaw.sin_cos();
        Matrix3::new(
            cb * cc,
            -cb * sc,
            sb,
            ca * sc + sa * sb * cc,
            ca * cc - sa * sb * sc,
            -sa * cb,
            sa * sc - ca * sb * cc,
            sa * cc + ca * sb * sc,
            ca * cb,
        )
    }

    /// Inverse of [`EulerAngles::to_matrix`]; pitch is returned in
    /// [-pi/2, pi/2], so the identity holds away from the gimbal band.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin();
        if r[(0, 2)].abs() > 1.0 - 1e-9 {
            // Gimbal lock: roll and yaw are coupled; pin roll to zero.
            let yaw = r[(1, 0)].atan2(r[(1, 1)]);
            return Self::new(0.0, pitch, if r[(0, 2)] > 0.0 { yaw } else { -yaw });
        }
        Self {
            roll: (-r[(1, 2)]).atan2(r[(2, 2)]),
            pitch,
            yaw: (-r[(0, 1)]).atan2(r[(0, 0)]),
        }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.roll, self.pitch, self.yaw)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn deg_to_rad(d: f64) -> f64 {
    d * std::f64::consts::PI / 180.0
}

pub fn rad_to_deg(r: f64) -> f64 {
    r * 180.0 / std::f64::consts::PI
}

/// Pinhole intrinsics for the frontal view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }
}

/// Orthographic top-down intrinsics for the bird's-eye view:
/// `u = sx * X + cx`, `v = sz * Z + cz` (pixels per meter scales).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevIntrinsics {
    pub sx: f64,
    pub sz: f64,
    pub cx: f64,
    pub cz: f64,
}

impl BevIntrinsics {
    pub fn new(sx: f64, sz: f64, cx: f64, cz: f64) -> Self {
        assert!(sx > 0.0 && sz > 0.0, "BEV scales must be positive");
        Self { sx, sz, cx, cz }
    }
}

/// Frontal-view projection of a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FvProjection {
    pub u: f64,
    pub v: f64,
    /// Recorded pixel value: the camera-frame depth Z.
    pub depth: f64,
}

/// Projects a camera-frame point onto the image plane. Returns `None` for
/// points at or behind the camera (Z <= EPS_DEPTH).
pub fn project_fv(point: &Vector3<f64>, k: &CameraIntrinsics) -> Option<FvProjection> {
    if point.z <= EPS_DEPTH {
        return None;
    }
    Some(FvProjection {
        u: k.fx * point.x / point.z + k.cx,
        v: k.fy * point.y / point.z + k.cy,
        depth: point.z,
    })
}

/// Bird's-eye-view projection of a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevProjection {
    pub u: f64,
    pub v: f64,
    /// Recorded pixel value: height above ground, `Y + camera_height`.
    pub value: f64,
}

/// Orthographic top-down projection. Every point projects; bounds checking is
/// the rasterizer's job.
pub fn project_bev(point: &Vector3<f64>, k: &BevIntrinsics, cam_height: f64) -> BevProjection {
    BevProjection {
        u: k.sx * point.x + k.cx,
        v: k.sz * point.z + k.cz,
        value: point.y + cam_height,
    }
}

/// Back-projects a pixel with known depth into the camera frame,
/// `p = depth * K^{-1} (u, v, 1)^T`. Inverse of [`project_fv`].
pub fn unproject_depth(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
    if depth <= 0.0 {
        return None;
    }
    Some(Vector3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Transforms every point of a cloud by `t`, preserving the sensor tag and
/// reliability flags.
pub fn transform_points(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        sensor: cloud.sensor,
        reliable: cloud.reliable.clone(),
    }
}

/// Draws a random perturbation transform: each Euler component uniform in
/// [-range_rot, +range_rot] degrees, each translation component uniform in
/// [-range_trans, +range_trans] meters. Deterministic per seed.
pub fn sample_miscalibration(range_rot_deg: f64, range_trans_m: f64, seed: u64) -> RigidTransform {
    assert!(range_rot_deg >= 0.0 && range_trans_m >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |half: f64| {
        if half == 0.0 {
            0.0
        } else {
            rng.gen_range(-half..=half)
        }
    };
    let rot_rad = deg_to_rad(range_rot_deg);
    let euler = EulerAngles::new(uniform(rot_rad), uniform(rot_rad), uniform(rot_rad));
    let trans = Vector3::new(
        uniform(range_trans_m),
        uniform(range_trans_m),
        uniform(range_trans_m),
    );
    RigidTransform::new(euler.to_matrix(), trans)
}

/// Standard miscalibration ranges (rotation degrees, translation meters).
pub const RANGE_R1: (f64, f64) = (10.0, 0.25);
pub const RANGE_R2: (f64, f64) = (20.0, 1.5);

/// Per-axis absolute calibration errors between a predicted and a ground
/// truth extrinsic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationError {
    /// Absolute Euler-angle errors of the relative rotation, radians.
    pub euler_abs: [f64; 3],
    /// Absolute translation errors per axis, meters.
    pub trans_abs: [f64; 3],
}

impl CalibrationError {
    pub fn mean_rotation(&self) -> f64 {
        self.euler_abs.iter().sum::<f64>() / 3.0
    }

    pub fn mean_translation(&self) -> f64 {
        self.trans_abs.iter().sum::<f64>() / 3.0
    }
}

/// Converts the relative rotation `R_gt^T R_pred` to Euler angles and reports
/// per-axis absolute errors for rotation and translation.
pub fn calibration_error(pred: &RigidTransform, gt: &RigidTransform) -> CalibrationError {
    let rel = gt.rotation.transpose() * pred.rotation;
    let euler = EulerAngles::from_matrix(&rel);
    let dt = pred.translation - gt.translation;
    CalibrationError {
        euler_abs: [euler.roll.abs(), euler.pitch.abs(), euler.yaw.abs()],
        trans_abs: [dt.x.abs(), dt.y.abs(), dt.z.abs()],
    }
}

/// Geodesic angle between two rotations, `arccos((tr(Ra^T Rb) - 1) / 2)`.
pub fn angular_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

/// Pulls a gradient w.r.t. a rotation matrix back to the rotation vector:
/// `out_i = <dl_dr, dR/dv_i>_F`, using the closed-form derivative of the
/// exponential map (`dR/dv_i = ((v_i [v]x + [v x (I - R) e_i]x) / |v|^2) R`,
/// with the small-angle limit `[e_i]x`).
pub fn rotvec_grad(v: &Vector3<f64>, dl_dr: &Matrix3<f64>) -> Vector3<f64> {
    let theta_sq = v.norm_squared();
    let r = RotationVector(*v).to_matrix();
    let mut out = Vector3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let dr_dvi = if theta_sq < 1e-14 {
            skew(&e)
        } else {
            let term = skew(&(v * v[i])) + skew(&v.cross(&((Matrix3::identity() - r) * e)));
            term * (1.0 / theta_sq) * r
        };
        out[i] = dl_dr.component_mul(&dr_dvi).sum();
    }
    out
}
