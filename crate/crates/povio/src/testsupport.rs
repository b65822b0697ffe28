//! Shared helpers for unit tests: random scene generation and central
//! finite-difference oracles, kept independent of the analytic Jacobian code
//! they check.

use nalgebra::{DMatrix, SMatrix, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::geometry::{CameraIntrinsics, Extrinsics, Pose, Rotation};
use crate::pose_only::line::LineObservation;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    )
}

pub fn random_unit(rng: &mut ChaCha20Rng) -> Vector3<f64> {
    loop {
        let v = random_vec(rng, -1.0, 1.0);
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha20Rng, max_angle: f64) -> Rotation {
    Rotation::from_scaled_axis(random_unit(rng) * rng.random_range(0.0..max_angle))
}

/// Camera pose at `position` with the optical axis aimed at `target`,
/// rolled by `roll` about the axis.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, roll: f64) -> Pose {
    let z = (target - position).normalize();
    let up = if z.z.abs() > 0.95 { Vector3::x() } else { Vector3::z() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    // Rows of the world->camera matrix are the camera axes in world coords.
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rot = Rotation::from_scaled_axis(Vector3::new(0.0, 0.0, roll))
        * Rotation::from_matrix(&r);
    Pose::new(rot, position)
}

pub fn random_intrinsics(rng: &mut ChaCha20Rng) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.random_range(380.0..470.0),
        rng.random_range(380.0..470.0),
        rng.random_range(300.0..340.0),
        rng.random_range(220.0..260.0),
        rng.random_range(-0.3..0.1),
        rng.random_range(-0.05..0.08),
        rng.random_range(-1e-3..1e-3),
        rng.random_range(-1e-3..1e-3),
    )
    .unwrap()
}

pub fn random_extrinsics(rng: &mut ChaCha20Rng) -> Extrinsics {
    Extrinsics {
        rotation_imu_to_camera: random_rotation(rng, 3.0),
        imu_position_in_camera: random_vec(rng, -0.15, 0.15),
    }
}

fn normalized_in_frame(pose: &Pose, world: &Vector3<f64>) -> Option<Vector3<f64>> {
    let p = pose.transform_to_frame(world);
    if p.z < 0.3 {
        return None;
    }
    let (u, v) = (p.x / p.z, p.y / p.z);
    if u.abs() > 0.7 || v.abs() > 0.7 {
        return None;
    }
    Some(Vector3::new(u, v, 1.0))
}

/// A random three-view point configuration with healthy parallax.
pub struct PointScene {
    pub imu_poses: [Pose; 3],
    pub ext: Extrinsics,
    pub cam: CameraIntrinsics,
    pub landmark: Vector3<f64>,
    /// Exact normalized observations in frames i, j, k.
    pub f: [Vector3<f64>; 3],
}

impl PointScene {
    pub fn cam_pose(&self, idx: usize) -> Pose {
        self.ext.camera_pose_from_imu(&self.imu_poses[idx])
    }

    pub fn random(rng: &mut ChaCha20Rng) -> Option<Self> {
        let landmark = random_vec(rng, -2.0, 2.0) + Vector3::new(0.0, 0.0, 5.0);
        let mut cam_poses = Vec::with_capacity(3);
        for _ in 0..3 {
            let pos = random_vec(rng, -1.5, 1.5);
            let aim = landmark + random_vec(rng, -0.6, 0.6);
            cam_poses.push(look_at(pos, aim, rng.random_range(-0.5..0.5)));
        }
        let mut f = Vec::with_capacity(3);
        for pose in &cam_poses {
            f.push(normalized_in_frame(pose, &landmark)?);
        }
        // Require usable parallax between the base pair and distinct views.
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if (cam_poses[a].position - cam_poses[b].position).norm() < 0.2 {
                return None;
            }
        }
        let ray_i = (landmark - cam_poses[0].position).normalize();
        let ray_j = (landmark - cam_poses[1].position).normalize();
        if ray_i.cross(&ray_j).norm() < 0.03 {
            return None;
        }
        let ext = random_extrinsics(rng);
        let imu_poses = [
            ext.imu_pose_from_camera(&cam_poses[0]),
            ext.imu_pose_from_camera(&cam_poses[1]),
            ext.imu_pose_from_camera(&cam_poses[2]),
        ];
        Some(PointScene {
            imu_poses,
            ext,
            cam: random_intrinsics(rng),
            landmark,
            f: [f[0], f[1], f[2]],
        })
    }
}

/// A random three-view configuration of one 3D line segment.
pub struct LineScene {
    pub imu_poses: [Pose; 3],
    pub ext: Extrinsics,
    pub cam: CameraIntrinsics,
    pub line_start: Vector3<f64>,
    pub line_end: Vector3<f64>,
    pub obs: [LineObservation; 3],
}

impl LineScene {
    pub fn cam_pose(&self, idx: usize) -> Pose {
        self.ext.camera_pose_from_imu(&self.imu_poses[idx])
    }

    /// Unit direction of the generating line, start -> end.
    pub fn direction(&self) -> Vector3<f64> {
        (self.line_end - self.line_start).normalize()
    }

    pub fn random(rng: &mut ChaCha20Rng) -> Option<Self> {
        let center = random_vec(rng, -1.5, 1.5) + Vector3::new(0.0, 0.0, 5.0);
        let dir = random_unit(rng);
        let half = rng.random_range(0.6..1.5);
        let line_start = center - dir * half;
        let line_end = center + dir * half;

        let mut cam_poses = Vec::with_capacity(3);
        for _ in 0..3 {
            let pos = random_vec(rng, -1.5, 1.5);
            let aim = center + random_vec(rng, -0.4, 0.4);
            cam_poses.push(look_at(pos, aim, rng.random_range(-0.5..0.5)));
        }
        // Keep the camera centers off the line itself.
        for pose in &cam_poses {
            let to_cam = pose.position - line_start;
            let dist = (to_cam - dir * to_cam.dot(&dir)).norm();
            if dist < 0.5 {
                return None;
            }
        }
        let cam = random_intrinsics(rng);
        let mut obs = Vec::with_capacity(3);
        for (idx, pose) in cam_poses.iter().enumerate() {
            // Per-frame endpoint re-sampling along the segment.
            let s = rng.random_range(0.0..0.25);
            let e = rng.random_range(0.75..1.0);
            let ps = line_start + (line_end - line_start) * s;
            let pe = line_start + (line_end - line_start) * e;
            let fs = normalized_in_frame(pose, &ps)?;
            let fe = normalized_in_frame(pose, &pe)?;
            obs.push(LineObservation::from_normalized(idx as u64, fs, fe, &cam).ok()?);
        }
        // Projection planes of the base pair must be distinct.
        let n_i = obs[0].normal;
        let n_j_in_i =
            (cam_poses[0].rotation * cam_poses[1].rotation.inverse()).rotate(&obs[1].normal);
        if n_i.cross(&n_j_in_i).norm() < 0.02 {
            return None;
        }
        let n_k_in_i =
            (cam_poses[0].rotation * cam_poses[2].rotation.inverse()).rotate(&obs[2].normal);
        if n_i.cross(&n_k_in_i).norm() < 0.02 {
            return None;
        }
        let ext = random_extrinsics(rng);
        let imu_poses = [
            ext.imu_pose_from_camera(&cam_poses[0]),
            ext.imu_pose_from_camera(&cam_poses[1]),
            ext.imu_pose_from_camera(&cam_poses[2]),
        ];
        Some(LineScene {
            imu_poses,
            ext,
            cam,
            line_start,
            line_end,
            obs: [obs[0].clone(), obs[1].clone(), obs[2].clone()],
        })
    }
}

pub const FD_STEP: f64 = 1e-6;

pub fn to_dyn<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |r, c| m[(r, c)])
}

/// Central finite differences of a 2-vector prediction w.r.t. a pose error
/// `[theta(3), p(3)]` under the crate's left-multiplicative convention.
pub fn fd_pose_jacobian2(f: impl Fn(&Pose) -> Vector2<f64>, pose: &Pose) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2, 6);
    for col in 0..6 {
        let perturb = |sign: f64| -> Pose {
            let mut delta = Vector3::zeros();
            delta[col % 3] = sign * FD_STEP;
            if col < 3 {
                Pose::new(pose.rotation.perturb_left(&delta), pose.position)
            } else {
                Pose::new(pose.rotation, pose.position + delta)
            }
        };
        let hi = f(&perturb(1.0));
        let lo = f(&perturb(-1.0));
        let d = (hi - lo) / (2.0 * FD_STEP);
        j[(0, col)] = d.x;
        j[(1, col)] = d.y;
    }
    j
}

/// Central finite differences w.r.t. the intrinsics block
/// `[k1 k2 p1 p2 fx fy cx cy]`.
pub fn fd_cam_jacobian2(
    f: impl Fn(&CameraIntrinsics) -> Vector2<f64>,
    cam: &CameraIntrinsics,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2, 8);
    for col in 0..8 {
        let perturb = |sign: f64| -> CameraIntrinsics {
            let mut c = *cam;
            let mut d = [0.0; 8];
            d[col] = sign * FD_STEP;
            c.apply_param_delta(&d);
            c
        };
        let hi = f(&perturb(1.0));
        let lo = f(&perturb(-1.0));
        let d = (hi - lo) / (2.0 * FD_STEP);
        j[(0, col)] = d.x;
        j[(1, col)] = d.y;
    }
    j
}

/// Central finite differences w.r.t. the extrinsics error
/// `[theta_ext(3), p_ext(3)]`.
pub fn fd_ext_jacobian2(
    f: impl Fn(&Extrinsics) -> Vector2<f64>,
    ext: &Extrinsics,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2, 6);
    for col in 0..6 {
        let perturb = |sign: f64| -> Extrinsics {
            let mut delta = Vector3::zeros();
            delta[col % 3] = sign * FD_STEP;
            if col < 3 {
                Extrinsics {
                    rotation_imu_to_camera: ext.rotation_imu_to_camera.perturb_left(&delta),
                    imu_position_in_camera: ext.imu_position_in_camera,
                }
            } else {
                Extrinsics {
                    rotation_imu_to_camera: ext.rotation_imu_to_camera,
                    imu_position_in_camera: ext.imu_position_in_camera + delta,
                }
            }
        };
        let hi = f(&perturb(1.0));
        let lo = f(&perturb(-1.0));
        let d = (hi - lo) / (2.0 * FD_STEP);
        j[(0, col)] = d.x;
        j[(1, col)] = d.y;
    }
    j
}

/// Assert per-entry agreement with relative tolerance `tol`, using a floor
/// tied to the block scale so near-zero entries compare absolutely.
pub fn assert_jacobian_close(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, tol: f64, what: &str) {
    assert_eq!(analytic.shape(), fd.shape(), "{what}: shape mismatch");
    let scale = analytic.abs().max().max(fd.abs().max()).max(1e-6);
    for r in 0..analytic.nrows() {
        for c in 0..analytic.ncols() {
            let (a, b) = (analytic[(r, c)], fd[(r, c)]);
            let denom = a.abs().max(b.abs()).max(1e-3 * scale);
            assert!(
                (a - b).abs() / denom < tol,
                "{what}: entry ({r},{c}) analytic {a} vs finite-difference {b} (scale {scale})"
            );
        }
    }
}
