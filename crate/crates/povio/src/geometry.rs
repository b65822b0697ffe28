//! Rotation/pose algebra and the pinhole + radial-tangential camera model.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Rotation`] stores a Hamilton unit quaternion whose matrix form maps
//!   **world coordinates into frame coordinates** (`x_frame = R * x_world`).
//! * A [`Pose`] is `{rotation: world->frame, position: frame origin in world}`.
//! * Small-angle rotation errors are applied on the left of the world->frame
//!   matrix: `R_true = Exp(-[theta]x) * R_hat`. Every analytic Jacobian in this
//!   crate is derived (and finite-difference verified) under this convention.

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::CAM_PARAMS;
use nalgebra::SMatrix;

/// Errors raised by camera-model operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    /// Undistortion iteration failed to converge (pathological distortion).
    #[error("undistortion did not converge after {0} iterations")]
    NonConvergence(usize),
    /// Intrinsics failed validation.
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric (cross-product) matrix of `v`: `skew(a) * b == a x b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A rotation stored as a Hamilton unit quaternion, with world->frame matrix
/// semantics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Build from quaternion components (w, x, y, z); renormalizes.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Rotation by angle `|v|` about axis `v/|v|` (matrix exponential of `[v]x`).
    pub fn from_scaled_axis(v: Vector3<f64>) -> Self {
        Rotation(UnitQuaternion::from_scaled_axis(v))
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Rotation(UnitQuaternion::from_matrix(m))
    }

    /// World->frame rotation matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Quaternion components as (w, x, y, z).
    pub fn wxyz(&self) -> (f64, f64, f64, f64) {
        let q = self.0.quaternion();
        (q.w, q.i, q.j, q.k)
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    /// Apply the rotation: `x_frame = R * x_world`.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Apply the inverse rotation: `x_world = R^T * x_frame`.
    pub fn rotate_back(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Left-multiplicative error injection: `Exp(-[theta]x) * self`.
    pub fn perturb_left(&self, theta: &Vector3<f64>) -> Self {
        Rotation(UnitQuaternion::from_scaled_axis(-theta) * self.0)
    }

    /// Recover `theta` such that `self = Exp(-[theta]x) * estimate`.
    pub fn left_error_from(&self, estimate: &Rotation) -> Vector3<f64> {
        -(self.0 * estimate.0.inverse()).scaled_axis()
    }

    /// Geodesic angle between two rotations, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Rotation vector `v` with `self = Exp([v]x)`.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    pub fn renormalize(&mut self) {
        self.0.renormalize();
    }

    pub fn norm_error(&self) -> f64 {
        (self.0.as_ref().norm() - 1.0).abs()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    /// Matrix-style composition: `(a * b).matrix() == a.matrix() * b.matrix()`.
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

/// Rigid transform of a frame w.r.t. the world: world->frame rotation plus the
/// frame origin expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), position: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        Pose { rotation, position }
    }

    /// World point -> frame coordinates.
    pub fn transform_to_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(&(world - self.position))
    }

    /// Frame coordinates -> world point.
    pub fn transform_to_world(&self, frame: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate_back(frame) + self.position
    }

    /// Pose whose `transform_to_frame` undoes this pose's.
    pub fn inverse(&self) -> Pose {
        Pose {
            rotation: self.rotation.inverse(),
            position: -self.rotation.rotate(&self.position),
        }
    }

    /// Frame-chaining composition: `(a.compose(&b)).transform_to_frame(x) ==
    /// a.transform_to_frame(&b.transform_to_frame(x))`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            position: rhs.transform_to_world(&self.position),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Pinhole intrinsics with radial-tangential (Brown-Conrady) distortion.
///
/// Parameter vector ordering, wherever intrinsics appear as a calibration
/// block, is `[k1, k2, p1, p2, fx, fy, cx, cy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_TOL: f64 = 1e-12;

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k1: f64,
        k2: f64,
        p1: f64,
        p2: f64,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, k1, k2, p1, p2 })
    }

    /// Distortion-free pinhole.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraIntrinsics { fx, fy, cx, cy, k1: 0.0, k2: 0.0, p1: 0.0, p2: 0.0 }
    }

    /// Apply radial-tangential distortion to normalized coordinates.
    pub fn distort(&self, u: f64, v: f64) -> (f64, f64) {
        let r2 = u * u + v * v;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let ud = u * radial + 2.0 * self.p1 * u * v + self.p2 * (r2 + 2.0 * u * u);
        let vd = v * radial + self.p1 * (r2 + 2.0 * v * v) + 2.0 * self.p2 * u * v;
        (ud, vd)
    }

    /// Project a normalized point `f = (u, v, 1)` through distortion and the
    /// pinhole matrix, returning pixel coordinates.
    pub fn project_and_distort(&self, f: &Vector3<f64>) -> Vector2<f64> {
        debug_assert!((f.z - 1.0).abs() < 1e-9, "expected normalized coordinates");
        let (ud, vd) = self.distort(f.x, f.y);
        Vector2::new(self.fx * ud + self.cx, self.fy * vd + self.cy)
    }

    /// Pinhole projection of normalized coordinates without distortion.
    pub fn project_rectified(&self, f: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * f.x + self.cx, self.fy * f.y + self.cy)
    }

    /// Invert `project_and_distort` by Newton iteration on the distortion map.
    pub fn undistort_to_normalized(
        &self,
        pixel: &Vector2<f64>,
    ) -> Result<Vector3<f64>, GeometryError> {
        let ud = (pixel.x - self.cx) / self.fx;
        let vd = (pixel.y - self.cy) / self.fy;
        let (mut u, mut v) = (ud, vd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (du, dv) = self.distort(u, v);
            let (eu, ev) = (du - ud, dv - vd);
            if eu.abs() < UNDISTORT_TOL && ev.abs() < UNDISTORT_TOL {
                return Ok(Vector3::new(u, v, 1.0));
            }
            let j = self.distortion_jacobian(u, v);
            match j.try_inverse() {
                Some(inv) => {
                    let step = inv * Vector2::new(eu, ev);
                    u -= step.x;
                    v -= step.y;
                }
                None => {
                    // Singular Jacobian: fall back to a damped fixed point.
                    u -= 0.5 * eu;
                    v -= 0.5 * ev;
                }
            }
        }
        Err(GeometryError::NonConvergence(UNDISTORT_MAX_ITERS))
    }

    /// 2x2 Jacobian of the distorted normalized coordinates w.r.t. the
    /// undistorted ones. Symmetric in the off-diagonal terms.
    pub fn distortion_jacobian(&self, u: f64, v: f64) -> Matrix2<f64> {
        let r2 = u * u + v * v;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let k11 = radial
            + 2.0 * self.k1 * u * u
            + 4.0 * self.k2 * r2 * u * u
            + 2.0 * self.p1 * v
            + 6.0 * self.p2 * u;
        let k22 = radial
            + 2.0 * self.k1 * v * v
            + 4.0 * self.k2 * r2 * v * v
            + 6.0 * self.p1 * v
            + 2.0 * self.p2 * u;
        let k12 = 2.0 * self.k1 * u * v
            + 4.0 * self.k2 * r2 * u * v
            + 2.0 * self.p1 * u
            + 2.0 * self.p2 * v;
        Matrix2::new(k11, k12, k12, k22)
    }

    /// 2x8 Jacobian of the predicted pixel w.r.t. the intrinsics block, with
    /// the undistorted normalized coordinates held fixed.
    pub fn pixel_intrinsics_jacobian(&self, u: f64, v: f64) -> SMatrix<f64, 2, CAM_PARAMS> {
        let r2 = u * u + v * v;
        let r4 = r2 * r2;
        let (ud, vd) = self.distort(u, v);
        let mut j = SMatrix::<f64, 2, CAM_PARAMS>::zeros();
        // columns: k1 k2 p1 p2 fx fy cx cy
        j[(0, 0)] = self.fx * u * r2;
        j[(1, 0)] = self.fy * v * r2;
        j[(0, 1)] = self.fx * u * r4;
        j[(1, 1)] = self.fy * v * r4;
        j[(0, 2)] = self.fx * 2.0 * u * v;
        j[(1, 2)] = self.fy * (r2 + 2.0 * v * v);
        j[(0, 3)] = self.fx * (r2 + 2.0 * u * u);
        j[(1, 3)] = self.fy * 2.0 * u * v;
        j[(0, 4)] = ud;
        j[(1, 5)] = vd;
        j[(0, 6)] = 1.0;
        j[(1, 7)] = 1.0;
        j
    }

    /// Linear map taking normalized-plane line coefficients to pixel-space
    /// line coefficients (inverse-transpose of the pinhole matrix, scaled).
    pub fn line_projection_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fy,
            0.0,
            0.0,
            0.0,
            self.fx,
            0.0,
            -self.fy * self.cx,
            -self.fx * self.cy,
            self.fx * self.fy,
        )
    }

    /// 3x8 Jacobian of the pixel-space line coefficients w.r.t. the intrinsics
    /// block, with the normalized-plane coefficients `n` held fixed.
    pub fn line_intrinsics_jacobian(&self, n: &Vector3<f64>) -> SMatrix<f64, 3, CAM_PARAMS> {
        let mut j = SMatrix::<f64, 3, CAM_PARAMS>::zeros();
        j[(0, 5)] = n.x;
        j[(1, 4)] = n.y;
        j[(2, 4)] = -self.cy * n.y + self.fy * n.z;
        j[(2, 5)] = -self.cx * n.x + self.fx * n.z;
        j[(2, 6)] = -self.fy * n.x;
        j[(2, 7)] = -self.fx * n.y;
        j
    }

    /// Intrinsics as the calibration-block vector `[k1 k2 p1 p2 fx fy cx cy]`.
    pub fn as_param_vector(&self) -> [f64; CAM_PARAMS] {
        [self.k1, self.k2, self.p1, self.p2, self.fx, self.fy, self.cx, self.cy]
    }

    /// Add a calibration-block correction (same ordering as `as_param_vector`).
    pub fn apply_param_delta(&mut self, d: &[f64]) {
        debug_assert_eq!(d.len(), CAM_PARAMS);
        self.k1 += d[0];
        self.k2 += d[1];
        self.p1 += d[2];
        self.p2 += d[3];
        self.fx += d[4];
        self.fy += d[5];
        self.cx += d[6];
        self.cy += d[7];
    }
}

/// IMU-camera rigid calibration: rotation IMU->camera and the IMU origin
/// expressed in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation_imu_to_camera: Rotation,
    pub imu_position_in_camera: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics {
            rotation_imu_to_camera: Rotation::identity(),
            imu_position_in_camera: Vector3::zeros(),
        }
    }

    /// Camera pose in the world from the IMU pose:
    /// `R_wc = R_ic * R_wi`, `p_c = p_i - R_wc^T * p_i_in_c`.
    pub fn camera_pose_from_imu(&self, imu: &Pose) -> Pose {
        let rotation = self.rotation_imu_to_camera * imu.rotation;
        let position = imu.position - rotation.rotate_back(&self.imu_position_in_camera);
        Pose { rotation, position }
    }

    /// Inverse of [`Extrinsics::camera_pose_from_imu`].
    pub fn imu_pose_from_camera(&self, cam: &Pose) -> Pose {
        let rotation = self.rotation_imu_to_camera.inverse() * cam.rotation;
        let position = cam.position + cam.rotation.rotate_back(&self.imu_position_in_camera);
        Pose { rotation, position }
    }
}

impl Default for Extrinsics {
    fn default() -> Self {
        Extrinsics::identity()
    }
}
