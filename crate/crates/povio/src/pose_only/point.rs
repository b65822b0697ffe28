//! Pose-only point measurement model.
//!
//! The feature depth in the first base frame is recovered in closed form from
//! the two base camera poses, the point is reconstructed and reprojected into
//! the current frame, and the prediction is differentiated against the three
//! involved IMU poses plus the calibration blocks.

use nalgebra::{SMatrix, Vector2, Vector3};

use crate::geometry::{skew, CameraIntrinsics, Extrinsics, Pose};
use crate::state::CAM_PARAMS;

use super::{cam_from_ext_jacobian, cam_from_imu_jacobian, Matrix2x6, ModelError};

/// Denominator floor below which pair geometry counts as degenerate.
pub const DEGENERACY_FLOOR: f64 = 1e-9;
/// Minimum forward depth for a prediction in the current frame, meters.
pub const MIN_FORWARD_DEPTH: f64 = 1e-6;

/// One normalized point observation.
#[derive(Debug, Clone, Copy)]
pub struct PointObservation {
    pub frame_id: u64,
    /// Raw pixel measurement.
    pub pixel: Vector2<f64>,
    /// Undistorted normalized coordinates `(u, v, 1)`.
    pub normalized: Vector3<f64>,
}

impl PointObservation {
    /// Ingest a pixel measurement, undistorting to normalized coordinates.
    pub fn from_pixel(
        frame_id: u64,
        pixel: Vector2<f64>,
        cam: &CameraIntrinsics,
    ) -> Result<Self, crate::geometry::GeometryError> {
        Ok(PointObservation { frame_id, pixel, normalized: cam.undistort_to_normalized(&pixel)? })
    }

    /// Build from exact normalized coordinates (simulator path).
    pub fn from_normalized(frame_id: u64, normalized: Vector3<f64>, cam: &CameraIntrinsics) -> Self {
        PointObservation { frame_id, pixel: cam.project_and_distort(&normalized), normalized }
    }
}

/// Per-feature time series of point observations, frame ids increasing.
#[derive(Debug, Clone, Default)]
pub struct PointTrack {
    pub feature_id: u64,
    observations: Vec<PointObservation>,
}

impl PointTrack {
    pub fn new(feature_id: u64) -> Self {
        PointTrack { feature_id, observations: Vec::new() }
    }

    /// Append an observation; frame ids must strictly increase.
    pub fn push(&mut self, obs: PointObservation) {
        if let Some(last) = self.observations.last() {
            assert!(obs.frame_id > last.frame_id, "frame ids must strictly increase");
        }
        self.observations.push(obs);
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[PointObservation] {
        &self.observations
    }

    pub fn get(&self, frame_id: u64) -> Option<&PointObservation> {
        self.observations.iter().find(|o| o.frame_id == frame_id)
    }

    pub fn first(&self) -> Option<&PointObservation> {
        self.observations.first()
    }

    pub fn last(&self) -> Option<&PointObservation> {
        self.observations.last()
    }

    /// Drop observations older than `frame_id` (window maintenance).
    pub fn prune_before(&mut self, frame_id: u64) {
        self.observations.retain(|o| o.frame_id >= frame_id);
    }
}

/// Depth of the feature in camera `i`, constrained by the pair `(i, j)`.
///
/// `f_i`, `f_j` are normalized observations; poses are camera poses.
pub fn depth_from_pair(
    pose_i: &Pose,
    pose_j: &Pose,
    f_i: &Vector3<f64>,
    f_j: &Vector3<f64>,
) -> Result<f64, ModelError> {
    let r_j = pose_j.rotation.matrix();
    let p_ji = r_j * (pose_i.position - pose_j.position);
    let r_rel = r_j * pose_i.rotation.matrix().transpose();
    let numerator = (skew(f_j) * p_ji).norm();
    let denominator = (skew(f_j) * (r_rel * f_i)).norm();
    if denominator < DEGENERACY_FLOOR {
        return Err(ModelError::DegenerateGeometry("zero parallax denominator"));
    }
    let depth = numerator / denominator;
    if depth <= MIN_FORWARD_DEPTH {
        return Err(ModelError::DegenerateGeometry("non-positive recovered depth"));
    }
    Ok(depth)
}

/// World position of the feature from its depth in camera `i`.
pub fn reconstruct_point(pose_i: &Pose, f_i: &Vector3<f64>, depth: f64) -> Vector3<f64> {
    pose_i.rotation.rotate_back(&(f_i * depth)) + pose_i.position
}

/// Predicted pixel of the feature in the current frame `k`.
pub fn predict_pixel(
    pose_i: &Pose,
    pose_j: &Pose,
    pose_k: &Pose,
    f_i: &Vector3<f64>,
    f_j: &Vector3<f64>,
    cam: &CameraIntrinsics,
) -> Result<Vector2<f64>, ModelError> {
    let depth = depth_from_pair(pose_i, pose_j, f_i, f_j)?;
    let world = reconstruct_point(pose_i, f_i, depth);
    let in_k = pose_k.transform_to_frame(&world);
    if in_k.z <= MIN_FORWARD_DEPTH {
        return Err(ModelError::BehindCamera(in_k.z));
    }
    let normalized = Vector3::new(in_k.x / in_k.z, in_k.y / in_k.z, 1.0);
    Ok(cam.project_and_distort(&normalized))
}

/// Residual `observed - predicted` in pixels for the current frame.
pub fn point_residual(
    observed_pixel: &Vector2<f64>,
    pose_i: &Pose,
    pose_j: &Pose,
    pose_k: &Pose,
    f_i: &Vector3<f64>,
    f_j: &Vector3<f64>,
    cam: &CameraIntrinsics,
) -> Result<Vector2<f64>, ModelError> {
    Ok(observed_pixel - predict_pixel(pose_i, pose_j, pose_k, f_i, f_j, cam)?)
}

/// Jacobian blocks of the predicted pixel w.r.t. the error states, plus the
/// sensitivities to the two base observations (used only to propagate their
/// noise into the measurement covariance — they are not state columns).
#[derive(Debug, Clone)]
pub struct PointJacobians {
    pub h_pose_i: Matrix2x6,
    pub h_pose_j: Matrix2x6,
    pub h_pose_k: Matrix2x6,
    pub h_cam: SMatrix<f64, 2, CAM_PARAMS>,
    pub h_ext: Matrix2x6,
    /// Sensitivity to the normalized base observation `f_i` (u, v).
    pub h_base_i: SMatrix<f64, 2, 2>,
    /// Sensitivity to the normalized base observation `f_j` (u, v).
    pub h_base_j: SMatrix<f64, 2, 2>,
}

/// Full measurement Jacobian of the predicted pixel, expressed against the
/// IMU-pose error states of the three base frames and the calibration blocks.
#[allow(clippy::too_many_arguments)]
pub fn point_jacobians(
    imu_pose_i: &Pose,
    imu_pose_j: &Pose,
    imu_pose_k: &Pose,
    f_i: &Vector3<f64>,
    f_j: &Vector3<f64>,
    cam: &CameraIntrinsics,
    ext: &Extrinsics,
) -> Result<PointJacobians, ModelError> {
    let pose_i = ext.camera_pose_from_imu(imu_pose_i);
    let pose_j = ext.camera_pose_from_imu(imu_pose_j);
    let pose_k = ext.camera_pose_from_imu(imu_pose_k);

    let r_i = pose_i.rotation.matrix();
    let r_j = pose_j.rotation.matrix();
    let r_k = pose_k.rotation.matrix();

    // Pair geometry.
    let p_ji = r_j * (pose_i.position - pose_j.position);
    let r_rel = r_j * r_i.transpose();
    let a_vec = -skew(f_j) * p_ji;
    let b_vec = skew(f_j) * (r_rel * f_i);
    let (na, nb) = (a_vec.norm(), b_vec.norm());
    if nb < DEGENERACY_FLOOR {
        return Err(ModelError::DegenerateGeometry("zero parallax denominator"));
    }
    let depth = na / nb;
    if depth <= MIN_FORWARD_DEPTH {
        return Err(ModelError::DegenerateGeometry("non-positive recovered depth"));
    }
    if na < DEGENERACY_FLOOR {
        return Err(ModelError::DegenerateGeometry("zero baseline"));
    }

    // Reconstruction and reprojection.
    let world = reconstruct_point(&pose_i, f_i, depth);
    let p_ck = pose_k.transform_to_frame(&world);
    if p_ck.z <= MIN_FORWARD_DEPTH {
        return Err(ModelError::BehindCamera(p_ck.z));
    }
    let (u, v) = (p_ck.x / p_ck.z, p_ck.y / p_ck.z);

    // Pixel <- normalized <- camera-frame point.
    let dist = cam.distortion_jacobian(u, v);
    let focal = nalgebra::Matrix2::new(cam.fx, 0.0, 0.0, cam.fy);
    let j_pix_norm = focal * dist;
    let inv_z = 1.0 / p_ck.z;
    let j_norm_pck = SMatrix::<f64, 2, 3>::new(
        inv_z,
        0.0,
        -p_ck.x * inv_z * inv_z,
        0.0,
        inv_z,
        -p_ck.y * inv_z * inv_z,
    );
    let j_pix_pck = j_pix_norm * j_norm_pck;
    let j_pix_world = j_pix_pck * r_k;

    // Depth w.r.t. the two base camera poses.
    let dz_da = a_vec.transpose() / (na * nb);
    let dz_db = -b_vec.transpose() * na / (nb * nb * nb);
    let mut da_dti = SMatrix::<f64, 3, 6>::zeros();
    da_dti.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(f_j) * r_j));
    let mut da_dtj = SMatrix::<f64, 3, 6>::zeros();
    da_dtj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(f_j) * skew(&p_ji)));
    da_dtj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(f_j) * r_j));
    let mut db_dti = SMatrix::<f64, 3, 6>::zeros();
    db_dti.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(f_j) * r_rel * skew(f_i)));
    let mut db_dtj = SMatrix::<f64, 3, 6>::zeros();
    db_dtj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(f_j) * skew(&(r_rel * f_i))));
    let dz_dti = dz_da * da_dti + dz_db * db_dti;
    let dz_dtj = dz_da * da_dtj + dz_db * db_dtj;

    // World point w.r.t. base pose i and depth.
    let mut dworld_dti = SMatrix::<f64, 3, 6>::zeros();
    dworld_dti
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-r_i.transpose() * skew(&(f_i * depth))));
    dworld_dti.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    let dworld_dz = r_i.transpose() * f_i;

    // Camera-level pose blocks.
    let h_ci = j_pix_world * (dworld_dti + dworld_dz * dz_dti);
    let h_cj = j_pix_world * (dworld_dz * dz_dtj);
    let mut dpck_dtk = SMatrix::<f64, 3, 6>::zeros();
    dpck_dtk.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&p_ck));
    dpck_dtk.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_k));
    let h_ck = j_pix_pck * dpck_dtk;

    // Map camera-pose errors onto IMU-pose and calibration errors.
    let h_pose_i = h_ci * cam_from_imu_jacobian(&imu_pose_i.rotation, ext);
    let h_pose_j = h_cj * cam_from_imu_jacobian(&imu_pose_j.rotation, ext);
    let h_pose_k = h_ck * cam_from_imu_jacobian(&imu_pose_k.rotation, ext);
    let h_ext = h_ci * cam_from_ext_jacobian(&pose_i, ext)
        + h_cj * cam_from_ext_jacobian(&pose_j, ext)
        + h_ck * cam_from_ext_jacobian(&pose_k, ext);
    let h_cam = cam.pixel_intrinsics_jacobian(u, v);

    // Sensitivities to the base observations (u, v components only).
    let e_uv = SMatrix::<f64, 3, 2>::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let dz_dfi = dz_db * (skew(f_j) * r_rel * e_uv);
    let h_base_i = j_pix_world * (r_i.transpose() * e_uv * depth + dworld_dz * dz_dfi);
    let dz_dfj = dz_da * (skew(&p_ji) * e_uv) - dz_db * (skew(&(r_rel * f_i)) * e_uv);
    let h_base_j = j_pix_world * (dworld_dz * dz_dfj);

    Ok(PointJacobians { h_pose_i, h_pose_j, h_pose_k, h_cam, h_ext, h_base_i, h_base_j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;

    #[test]
    fn depth_worked_example() {
        let pose_i = Pose::identity();
        let pose_j = Pose::new(crate::geometry::Rotation::identity(), Vector3::new(1.0, 0.0, 0.0));
        let f_i = Vector3::new(0.0, 0.0, 1.0);
        let f_j = Vector3::new(-0.5, 0.0, 1.0);
        let depth = depth_from_pair(&pose_i, &pose_j, &f_i, &f_j).unwrap();
        assert_abs_diff_eq!(depth, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            reconstruct_point(&pose_i, &f_i, depth),
            Vector3::new(0.0, 0.0, 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn depth_identical_poses_degenerate() {
        let pose = Pose::identity();
        let f = Vector3::new(0.1, -0.2, 1.0);
        assert!(matches!(
            depth_from_pair(&pose, &pose, &f, &f),
            Err(ModelError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn reconstruct_translated_camera() {
        let pose = Pose::new(
            crate::geometry::Rotation::identity(),
            Vector3::new(1.0, 1.0, 1.0),
        );
        assert_abs_diff_eq!(
            reconstruct_point(&pose, &Vector3::new(0.0, 0.0, 1.0), 3.0),
            Vector3::new(1.0, 1.0, 4.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn depth_recovers_generating_landmark() {
        let mut rng = rng(101);
        let mut checked = 0;
        while checked < 100 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let depth =
                depth_from_pair(&scene.cam_pose(0), &scene.cam_pose(1), &scene.f[0], &scene.f[1])
                    .unwrap();
            let true_depth = scene.cam_pose(0).transform_to_frame(&scene.landmark).z;
            assert!((depth - true_depth).abs() / true_depth < 1e-9);
            let world = reconstruct_point(&scene.cam_pose(0), &scene.f[0], depth);
            assert!((world - scene.landmark).norm() < 1e-9 * scene.landmark.norm().max(1.0));

            // Two-view projection identity on the generating geometry.
            let z_j =
                depth_from_pair(&scene.cam_pose(1), &scene.cam_pose(0), &scene.f[1], &scene.f[0])
                    .unwrap();
            let r_rel = scene.cam_pose(1).rotation.matrix()
                * scene.cam_pose(0).rotation.matrix().transpose();
            let p_ji = scene.cam_pose(1).rotation.matrix()
                * (scene.cam_pose(0).position - scene.cam_pose(1).position);
            let lhs = scene.f[1] * z_j;
            let rhs = r_rel * (scene.f[0] * depth) + p_ji;
            assert!((lhs - rhs).norm() < 1e-9);

            // Relabeling symmetry: both depths reconstruct the same world point.
            let world_j = reconstruct_point(&scene.cam_pose(1), &scene.f[1], z_j);
            assert!((world - world_j).norm() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn residual_zero_on_consistent_data_and_additive() {
        let mut rng = rng(102);
        let mut checked = 0;
        while checked < 50 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let observed = scene.cam.project_and_distort(&scene.f[2]);
            let r = point_residual(
                &observed,
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            assert!(r.norm() < 1e-8, "noise-free residual {}", r.norm());

            let r2 = point_residual(
                &(observed + Vector2::new(1.0, 0.0)),
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            assert_abs_diff_eq!(r2 - r, Vector2::new(1.0, 0.0), epsilon = 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn residual_matches_straight_line_chain_oracle() {
        // Independent reimplementation of the full prediction chain.
        fn oracle(
            observed: &Vector2<f64>,
            pose_i: &Pose,
            pose_j: &Pose,
            pose_k: &Pose,
            f_i: &Vector3<f64>,
            f_j: &Vector3<f64>,
            cam: &CameraIntrinsics,
        ) -> Vector2<f64> {
            let ri = pose_i.rotation.matrix();
            let rj = pose_j.rotation.matrix();
            let rk = pose_k.rotation.matrix();
            let p_ji = rj * (pose_i.position - pose_j.position);
            let num = (skew(f_j) * p_ji).norm();
            let den = (skew(f_j) * (rj * ri.transpose() * f_i)).norm();
            let z = num / den;
            let world = ri.transpose() * (f_i * z) + pose_i.position;
            let pk = rk * (world - pose_k.position);
            let (u, v) = (pk.x / pk.z, pk.y / pk.z);
            let r2 = u * u + v * v;
            let rad = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2;
            let ud = u * rad + 2.0 * cam.p1 * u * v + cam.p2 * (r2 + 2.0 * u * u);
            let vd = v * rad + cam.p1 * (r2 + 2.0 * v * v) + 2.0 * cam.p2 * u * v;
            observed - Vector2::new(cam.fx * ud + cam.cx, cam.fy * vd + cam.cy)
        }

        let mut rng = rng(103);
        let mut checked = 0;
        while checked < 50 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let observed = scene.cam.project_and_distort(&scene.f[2])
                + Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let r = point_residual(
                &observed,
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            let expected = oracle(
                &observed,
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            );
            assert!((r - expected).norm() < 1e-10);
            checked += 1;
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = rng(104);
        let mut checked = 0;
        while checked < 25 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let jac = match point_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let predict = |poses: [&Pose; 3], cam: &CameraIntrinsics, ext: &Extrinsics| {
                predict_pixel(
                    &ext.camera_pose_from_imu(poses[0]),
                    &ext.camera_pose_from_imu(poses[1]),
                    &ext.camera_pose_from_imu(poses[2]),
                    &scene.f[0],
                    &scene.f[1],
                    cam,
                )
                .unwrap()
            };

            for (which, analytic) in
                [(0, &jac.h_pose_i), (1, &jac.h_pose_j), (2, &jac.h_pose_k)]
            {
                let fd = fd_pose_jacobian2(
                    |p| {
                        let mut poses =
                            [&scene.imu_poses[0], &scene.imu_poses[1], &scene.imu_poses[2]];
                        poses[which] = p;
                        predict(poses, &scene.cam, &scene.ext)
                    },
                    &scene.imu_poses[which],
                );
                assert_jacobian_close(
                    &to_dyn(analytic),
                    &fd,
                    1e-4,
                    &format!("point pose block {which}"),
                );
            }

            let fd_cam = fd_cam_jacobian2(
                |cam| {
                    predict(
                        [&scene.imu_poses[0], &scene.imu_poses[1], &scene.imu_poses[2]],
                        cam,
                        &scene.ext,
                    )
                },
                &scene.cam,
            );
            assert_jacobian_close(&to_dyn(&jac.h_cam), &fd_cam, 1e-4, "point cam");

            let fd_ext = fd_ext_jacobian2(
                |ext| {
                    predict(
                        [&scene.imu_poses[0], &scene.imu_poses[1], &scene.imu_poses[2]],
                        &scene.cam,
                        ext,
                    )
                },
                &scene.ext,
            );
            assert_jacobian_close(&to_dyn(&jac.h_ext), &fd_ext, 1e-4, "point ext");
            checked += 1;
        }
    }

    #[test]
    fn common_translation_invariance() {
        let mut rng = rng(105);
        let mut checked = 0;
        while checked < 20 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let jac = match point_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let t = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            // Shifting every pose and the landmark leaves the residual unchanged...
            let shift = |p: &Pose| Pose::new(p.rotation, p.position + t);
            let observed = scene.cam.project_and_distort(&scene.f[2]);
            let r0 = point_residual(
                &observed,
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            let r1 = point_residual(
                &observed,
                &shift(&scene.cam_pose(0)),
                &shift(&scene.cam_pose(1)),
                &shift(&scene.cam_pose(2)),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            assert!((r1 - r0).norm() < 1e-8);
            // ... so the position-Jacobian blocks annihilate a common translation.
            let sum = (jac.h_pose_i.fixed_view::<2, 3>(0, 3)
                + jac.h_pose_j.fixed_view::<2, 3>(0, 3)
                + jac.h_pose_k.fixed_view::<2, 3>(0, 3))
                * t;
            assert!(sum.norm() < 1e-8 * jac_scale(&[&jac.h_pose_i, &jac.h_pose_j, &jac.h_pose_k]));
            checked += 1;
        }
    }

    #[test]
    fn intrinsics_jacobian_focal_columns() {
        let mut rng = rng(106);
        let mut checked = 0;
        while checked < 20 {
            let Some(mut scene) = PointScene::random(&mut rng) else { continue };
            scene.cam = CameraIntrinsics::pinhole(scene.cam.fx, scene.cam.fy, scene.cam.cx, scene.cam.cy);
            let jac = match point_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            // With zero distortion the fx/fy columns are (u', 0) and (0, v').
            let predicted = predict_pixel(
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
            )
            .unwrap();
            let ud = (predicted.x - scene.cam.cx) / scene.cam.fx;
            let vd = (predicted.y - scene.cam.cy) / scene.cam.fy;
            assert_abs_diff_eq!(jac.h_cam[(0, 4)], ud, epsilon = 1e-9);
            assert_abs_diff_eq!(jac.h_cam[(1, 4)], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(jac.h_cam[(0, 5)], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(jac.h_cam[(1, 5)], vd, epsilon = 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn base_observation_sensitivities_match_finite_differences() {
        let mut rng = rng(107);
        let mut checked = 0;
        while checked < 20 {
            let Some(scene) = PointScene::random(&mut rng) else { continue };
            let jac = match point_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.f[0],
                &scene.f[1],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let h = 1e-7;
            for (which, analytic) in [(0usize, &jac.h_base_i), (1usize, &jac.h_base_j)] {
                let mut fd = nalgebra::DMatrix::zeros(2, 2);
                for col in 0..2 {
                    let predict = |sign: f64| {
                        let mut f = [scene.f[0], scene.f[1]];
                        f[which][col] += sign * h;
                        predict_pixel(
                            &scene.cam_pose(0),
                            &scene.cam_pose(1),
                            &scene.cam_pose(2),
                            &f[0],
                            &f[1],
                            &scene.cam,
                        )
                        .unwrap()
                    };
                    let d = (predict(1.0) - predict(-1.0)) / (2.0 * h);
                    fd[(0, col)] = d.x;
                    fd[(1, col)] = d.y;
                }
                assert_jacobian_close(
                    &to_dyn(analytic),
                    &fd,
                    2e-4,
                    &format!("point base obs {which}"),
                );
            }
            checked += 1;
        }
    }

    fn jac_scale(blocks: &[&Matrix2x6]) -> f64 {
        blocks.iter().map(|b| b.abs().max()).fold(1.0, f64::max)
    }
}
