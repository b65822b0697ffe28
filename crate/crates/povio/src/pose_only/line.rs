//! Pose-only line measurement model.
//!
//! Each observation of a line contributes a projection-plane normal. A pair of
//! views yields the line direction (cross product of the two rotated plane
//! normals) and the perpendicular distance from the first camera's origin, in
//! closed form from the two camera poses. The line is then predicted in the
//! current frame and the residual is the perpendicular pixel distance of the
//! observed endpoints to the predicted line.
//!
//! Endpoint labels are per-frame: the direction sign `sgn(zeta)` orients the
//! recovered direction start->end of the *first* base frame, which makes the
//! pair geometry invariant to endpoint swaps in the other frames.

use nalgebra::{SMatrix, Vector2, Vector3};

use crate::geometry::{skew, CameraIntrinsics, Extrinsics, GeometryError, Pose};
use crate::state::CAM_PARAMS;

use super::{cam_from_ext_jacobian, cam_from_imu_jacobian, Matrix2x6, ModelError};

/// Cross-product norm below which two projection planes count as parallel.
pub const PARALLEL_PLANE_FLOOR: f64 = 1e-9;
/// Normalized margin around the `sgn(zeta)` switching surface.
pub const SIGN_SWITCH_FLOOR: f64 = 1e-6;
/// Distances below this are flagged unobservable.
pub const DISTANCE_FLOOR: f64 = 1e-9;

/// One line observation: raw pixel endpoints, undistorted normalized
/// endpoints, rectified (undistorted-pinhole) pixel endpoints, and the unit
/// normal of the projection plane spanned by the endpoint rays.
#[derive(Debug, Clone)]
pub struct LineObservation {
    pub frame_id: u64,
    pub start_pixel: Vector2<f64>,
    pub end_pixel: Vector2<f64>,
    pub f_start: Vector3<f64>,
    pub f_end: Vector3<f64>,
    /// `(u, v, 1)` rectified pixel endpoints used by the residual; fixed at
    /// ingest time, so they are measurement constants.
    pub rectified_start: Vector3<f64>,
    pub rectified_end: Vector3<f64>,
    /// Unit projection-plane normal, sign-canonicalized.
    pub normal: Vector3<f64>,
}

impl LineObservation {
    /// Ingest raw pixel endpoints: undistort, form the plane normal, and
    /// precompute rectified endpoints.
    pub fn from_pixels(
        frame_id: u64,
        start_pixel: Vector2<f64>,
        end_pixel: Vector2<f64>,
        cam: &CameraIntrinsics,
        min_length_px: f64,
    ) -> Result<Self, ModelError> {
        if (end_pixel - start_pixel).norm() < min_length_px {
            return Err(ModelError::DegenerateEndpoints);
        }
        let f_start = cam
            .undistort_to_normalized(&start_pixel)
            .map_err(|_: GeometryError| ModelError::DegenerateEndpoints)?;
        let f_end = cam
            .undistort_to_normalized(&end_pixel)
            .map_err(|_: GeometryError| ModelError::DegenerateEndpoints)?;
        let normal = plane_normal(&f_start, &f_end)?;
        Ok(LineObservation {
            frame_id,
            start_pixel,
            end_pixel,
            rectified_start: rectify(&f_start, cam),
            rectified_end: rectify(&f_end, cam),
            f_start,
            f_end,
            normal,
        })
    }

    /// Build from exact normalized endpoints (simulator path).
    pub fn from_normalized(
        frame_id: u64,
        f_start: Vector3<f64>,
        f_end: Vector3<f64>,
        cam: &CameraIntrinsics,
    ) -> Result<Self, ModelError> {
        let normal = plane_normal(&f_start, &f_end)?;
        Ok(LineObservation {
            frame_id,
            start_pixel: cam.project_and_distort(&f_start),
            end_pixel: cam.project_and_distort(&f_end),
            rectified_start: rectify(&f_start, cam),
            rectified_end: rectify(&f_end, cam),
            f_start,
            f_end,
            normal,
        })
    }
}

/// Per-feature time series of line observations, frame ids increasing.
#[derive(Debug, Clone, Default)]
pub struct LineTrack {
    pub feature_id: u64,
    observations: Vec<LineObservation>,
}

impl LineTrack {
    pub fn new(feature_id: u64) -> Self {
        LineTrack { feature_id, observations: Vec::new() }
    }

    pub fn push(&mut self, obs: LineObservation) {
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

    pub fn observations(&self) -> &[LineObservation] {
        &self.observations
    }

    pub fn get(&self, frame_id: u64) -> Option<&LineObservation> {
        self.observations.iter().find(|o| o.frame_id == frame_id)
    }

    pub fn first(&self) -> Option<&LineObservation> {
        self.observations.first()
    }

    pub fn last(&self) -> Option<&LineObservation> {
        self.observations.last()
    }

    pub fn prune_before(&mut self, frame_id: u64) {
        self.observations.retain(|o| o.frame_id >= frame_id);
    }
}

fn rectify(f: &Vector3<f64>, cam: &CameraIntrinsics) -> Vector3<f64> {
    let px = cam.project_rectified(f);
    Vector3::new(px.x, px.y, 1.0)
}

/// Unit normal of the plane through the camera center and both endpoint rays,
/// sign-canonicalized so the first component of significant magnitude is
/// positive.
pub fn plane_normal(
    f_start: &Vector3<f64>,
    f_end: &Vector3<f64>,
) -> Result<Vector3<f64>, ModelError> {
    let c = skew(f_start) * f_end;
    let n = c.norm();
    if n < 1e-12 {
        return Err(ModelError::DegenerateEndpoints);
    }
    let mut unit = c / n;
    for i in 0..3 {
        if unit[i].abs() > 1e-9 {
            if unit[i] < 0.0 {
                unit = -unit;
            }
            break;
        }
    }
    Ok(unit)
}

/// Closed-form pair geometry of a line constrained by base frames `(i, j)`.
#[derive(Debug, Clone)]
pub struct LinePairGeometry {
    /// Unnormalized direction `sgn(zeta) * [R n_j]x n_i` in frame `i`.
    pub v_alpha: Vector3<f64>,
    /// Scaled distance `|v_alpha| * d_l`.
    pub d_l_alpha: f64,
    /// `sgn(zeta)`: orients the direction start->end of frame `i`.
    pub sign: f64,
    /// Unit direction of the line in frame `i`, start->end.
    pub v_e: Vector3<f64>,
    /// Perpendicular distance from the frame-`i` origin to the line, meters.
    pub d_l: f64,
    /// Frame-`i` plane normal oriented as the line moment `P x v_e`.
    pub oriented_normal_i: Vector3<f64>,
    /// Set when the distance is unobservable (line through the origin or
    /// zero baseline); the pair must not be used for updates.
    pub distance_degenerate: bool,
}

/// Line direction in frame `i` from the view pair `(i, j)`.
///
/// Returns the unnormalized `v_alpha`, the orientation sign, and the unit
/// direction `v_e` pointing start->end of the frame-`i` observation.
pub fn direction_from_pair(
    pose_i: &Pose,
    pose_j: &Pose,
    obs_i: &LineObservation,
    obs_j: &LineObservation,
) -> Result<(Vector3<f64>, f64, Vector3<f64>), ModelError> {
    let r_rel = pose_i.rotation.matrix() * pose_j.rotation.matrix().transpose();
    let rotated_nj = r_rel * obs_j.normal;
    let raw = skew(&rotated_nj) * obs_i.normal;
    let raw_norm = raw.norm();
    if raw_norm < PARALLEL_PLANE_FLOOR {
        return Err(ModelError::DegenerateGeometry("parallel projection planes"));
    }
    let chord = obs_i.f_end - obs_i.f_start;
    let zeta = chord.dot(&raw);
    if zeta.abs() < SIGN_SWITCH_FLOOR * chord.norm() * raw_norm {
        return Err(ModelError::DegenerateGeometry("direction sign ill-defined"));
    }
    let sign = zeta.signum();
    let v_alpha = raw * sign;
    Ok((v_alpha, sign, v_alpha / raw_norm))
}

/// Perpendicular distance from the frame-`i` origin to the line, from the
/// view pair `(i, j)` and the pair direction `v_alpha`.
///
/// Returns `(d_l_alpha, d_l, unobservable)`; `unobservable` flags a vanishing
/// numerator (zero baseline or line through the origin), reported with
/// `d_l = 0` rather than as an error.
pub fn distance_from_pair(
    pose_i: &Pose,
    pose_j: &Pose,
    _obs_i: &LineObservation,
    obs_j: &LineObservation,
    v_alpha: &Vector3<f64>,
) -> Result<(f64, f64, bool), ModelError> {
    let r_rel = pose_i.rotation.matrix() * pose_j.rotation.matrix().transpose();
    let rotated_nj = r_rel * obs_j.normal;
    let v_norm = v_alpha.norm();
    if v_norm < PARALLEL_PLANE_FLOOR {
        return Err(ModelError::DegenerateGeometry("zero direction vector"));
    }
    let p_ij = pose_i.rotation.rotate(&(pose_j.position - pose_i.position));
    let a_l = skew(&rotated_nj) * (skew(&p_ij) * v_alpha);
    let d_l_alpha = a_l.norm() / v_norm;
    let d_l = d_l_alpha / v_norm;
    let unobservable = d_l < DISTANCE_FLOOR;
    Ok((d_l_alpha, d_l, unobservable))
}

/// Full pair geometry for base frames `(i, j)`.
pub fn line_pair_geometry(
    pose_i: &Pose,
    pose_j: &Pose,
    obs_i: &LineObservation,
    obs_j: &LineObservation,
) -> Result<LinePairGeometry, ModelError> {
    let (v_alpha, sign, v_e) = direction_from_pair(pose_i, pose_j, obs_i, obs_j)?;
    let (d_l_alpha, d_l, distance_degenerate) =
        distance_from_pair(pose_i, pose_j, obs_i, obs_j, &v_alpha)?;
    let moment_dir = skew(&obs_i.f_start) * v_e;
    let alignment = moment_dir.dot(&obs_i.normal);
    if alignment.abs() < 1e-12 {
        return Err(ModelError::DegenerateGeometry("line through the optical ray"));
    }
    let oriented_normal_i = obs_i.normal * alignment.signum();
    Ok(LinePairGeometry {
        v_alpha,
        d_l_alpha,
        sign,
        v_e,
        d_l,
        oriented_normal_i,
        distance_degenerate,
    })
}

/// Predicted pixel-space line coefficients in the current frame `k`.
pub fn predict_line_in_frame(
    pose_i: &Pose,
    pose_k: &Pose,
    pair: &LinePairGeometry,
    cam: &CameraIntrinsics,
) -> Result<Vector3<f64>, ModelError> {
    let r_ki = pose_k.rotation.matrix() * pose_i.rotation.matrix().transpose();
    let p_ki = pose_k.rotation.rotate(&(pose_i.position - pose_k.position));
    let n_l = r_ki * pair.oriented_normal_i * pair.d_l_alpha
        + skew(&p_ki) * (r_ki * pair.v_alpha);
    Ok(cam.line_projection_matrix() * n_l)
}

/// Signed perpendicular pixel distances of the observed endpoints to the
/// predicted line, negated (the modeled observation is zero distance).
pub fn line_residual(
    obs_k: &LineObservation,
    line: &Vector3<f64>,
) -> Result<Vector2<f64>, ModelError> {
    let d = endpoint_distances(obs_k, line)?;
    Ok(-d)
}

fn endpoint_distances(
    obs_k: &LineObservation,
    line: &Vector3<f64>,
) -> Result<Vector2<f64>, ModelError> {
    let norm = (line.x * line.x + line.y * line.y).sqrt();
    if norm < 1e-12 {
        return Err(ModelError::DegenerateLine);
    }
    Ok(Vector2::new(
        obs_k.rectified_start.dot(line) / norm,
        obs_k.rectified_end.dot(line) / norm,
    ))
}

/// Predicted endpoint distances for the full chain (camera poses in, signed
/// pixel distances out). The filter residual is the negation of this.
pub fn predict_endpoint_distances(
    pose_i: &Pose,
    pose_j: &Pose,
    pose_k: &Pose,
    obs_i: &LineObservation,
    obs_j: &LineObservation,
    obs_k: &LineObservation,
    cam: &CameraIntrinsics,
) -> Result<Vector2<f64>, ModelError> {
    let pair = line_pair_geometry(pose_i, pose_j, obs_i, obs_j)?;
    let line = predict_line_in_frame(pose_i, pose_k, &pair, cam)?;
    endpoint_distances(obs_k, &line)
}

/// Jacobian blocks of the predicted endpoint distances w.r.t. the error
/// states (same sign convention as [`predict_endpoint_distances`]), plus the
/// sensitivities to the two base-frame plane normals (used only to propagate
/// observation noise into the measurement covariance).
#[derive(Debug, Clone)]
pub struct LineJacobians {
    pub h_pose_i: Matrix2x6,
    pub h_pose_j: Matrix2x6,
    pub h_pose_k: Matrix2x6,
    pub h_cam: SMatrix<f64, 2, CAM_PARAMS>,
    pub h_ext: Matrix2x6,
    /// Sensitivity to the stored frame-`i` plane normal.
    pub h_normal_i: SMatrix<f64, 2, 3>,
    /// Sensitivity to the stored frame-`j` plane normal.
    pub h_normal_j: SMatrix<f64, 2, 3>,
}

/// First-order covariance of a stored plane normal induced by isotropic
/// endpoint noise of `sigma_normalized` (normalized-plane units).
pub fn normal_covariance(obs: &LineObservation, sigma_normalized: f64) -> nalgebra::Matrix3<f64> {
    let c = skew(&obs.f_start) * obs.f_end;
    let norm = c.norm();
    let n = c / norm;
    let proj = nalgebra::Matrix3::identity() - n * n.transpose();
    let e_uv = SMatrix::<f64, 3, 2>::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let j_start = proj * (-skew(&obs.f_end)) * e_uv / norm;
    let j_end = proj * skew(&obs.f_start) * e_uv / norm;
    (j_start * j_start.transpose() + j_end * j_end.transpose()) * sigma_normalized.powi(2)
}

/// Full measurement Jacobian of the line prediction, expressed against the
/// IMU-pose error states of the three base frames and the calibration blocks.
/// `sgn(zeta)` and the moment orientation are held constant.
#[allow(clippy::too_many_arguments)]
pub fn line_jacobians(
    imu_pose_i: &Pose,
    imu_pose_j: &Pose,
    imu_pose_k: &Pose,
    obs_i: &LineObservation,
    obs_j: &LineObservation,
    obs_k: &LineObservation,
    cam: &CameraIntrinsics,
    ext: &Extrinsics,
) -> Result<LineJacobians, ModelError> {
    let pose_i = ext.camera_pose_from_imu(imu_pose_i);
    let pose_j = ext.camera_pose_from_imu(imu_pose_j);
    let pose_k = ext.camera_pose_from_imu(imu_pose_k);

    let pair = line_pair_geometry(&pose_i, &pose_j, obs_i, obs_j)?;
    if pair.distance_degenerate {
        return Err(ModelError::DegenerateGeometry("unobservable line distance"));
    }
    let r_i = pose_i.rotation.matrix();
    let r_k = pose_k.rotation.matrix();
    let r_rel = r_i * pose_j.rotation.matrix().transpose();
    let u = r_rel * obs_j.normal;
    let n_i = pair.oriented_normal_i;
    let v_alpha = pair.v_alpha;
    let p_ij = pose_i.rotation.rotate(&(pose_j.position - pose_i.position));
    let w = skew(&p_ij) * v_alpha;
    let a_l = skew(&u) * w;
    let (na, nv) = (a_l.norm(), v_alpha.norm());
    if na < DISTANCE_FLOOR {
        return Err(ModelError::DegenerateGeometry("unobservable line distance"));
    }

    let r_ki = r_k * r_i.transpose();
    let p_ki = pose_k.rotation.rotate(&(pose_i.position - pose_k.position));
    let rn = r_ki * n_i;
    let rv = r_ki * v_alpha;
    let n_l = rn * pair.d_l_alpha + skew(&p_ki) * rv;
    let i_l = cam.line_projection_matrix() * n_l;
    let dnorm = i_l.x * i_l.x + i_l.y * i_l.y;
    if dnorm.sqrt() < 1e-12 {
        return Err(ModelError::DegenerateLine);
    }

    // Distance rows w.r.t. the image-line coefficients.
    let mut j_d_line = SMatrix::<f64, 2, 3>::zeros();
    for (row, q) in [(0, &obs_k.rectified_start), (1, &obs_k.rectified_end)] {
        let qi = q.dot(&i_l);
        let scale = dnorm.powf(1.5);
        j_d_line[(row, 0)] = (dnorm * q.x - i_l.x * qi) / scale;
        j_d_line[(row, 1)] = (dnorm * q.y - i_l.y * qi) / scale;
        j_d_line[(row, 2)] = dnorm / scale;
    }
    let pre = j_d_line * cam.line_projection_matrix();

    // Direction blocks (zeta sign held constant).
    let s = pair.sign;
    let mut jv_i = SMatrix::<f64, 3, 6>::zeros();
    jv_i.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-(skew(&obs_i.normal) * skew(&u)) * s));
    let mut jv_j = SMatrix::<f64, 3, 6>::zeros();
    jv_j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(skew(&obs_i.normal) * r_rel * skew(&obs_j.normal) * s));

    // Scaled-distance blocks.
    let dd_da = a_l.transpose() / (na * nv);
    let dd_dv_direct = -v_alpha.transpose() * na / (nv * nv * nv);
    let da_dv = skew(&u) * skew(&p_ij);
    let mut da_dti = SMatrix::<f64, 3, 6>::zeros();
    da_dti
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-skew(&w) * skew(&u) - skew(&u) * skew(&v_alpha) * skew(&p_ij)));
    da_dti.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&u) * skew(&v_alpha) * r_i));
    let mut da_dtj = SMatrix::<f64, 3, 6>::zeros();
    da_dtj
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(skew(&w) * r_rel * skew(&obs_j.normal)));
    da_dtj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(skew(&u) * skew(&v_alpha) * r_i)));
    let dd_dti = dd_da * da_dti;
    let dd_dtj = dd_da * da_dtj;
    let dd_dv = dd_da * da_dv + dd_dv_direct;

    // Current-frame normal blocks.
    let gamma = skew(&rv);
    let mut dnl_dti = SMatrix::<f64, 3, 6>::zeros();
    dnl_dti
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-(r_ki * skew(&n_i)) * pair.d_l_alpha - skew(&p_ki) * r_ki * skew(&v_alpha)));
    dnl_dti.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-gamma * r_k));
    let mut dnl_dtk = SMatrix::<f64, 3, 6>::zeros();
    dnl_dtk
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(skew(&(rn * pair.d_l_alpha)) + skew(&p_ki) * gamma - gamma * skew(&p_ki)));
    dnl_dtk.fixed_view_mut::<3, 3>(0, 3).copy_from(&(gamma * r_k));
    let dnl_dv = skew(&p_ki) * r_ki;

    // Camera-level pose blocks assembled by the chain rule.
    let h_ci = pre * (dnl_dti + rn * (dd_dti + dd_dv * jv_i) + dnl_dv * jv_i);
    let h_cj = pre * (rn * (dd_dtj + dd_dv * jv_j) + dnl_dv * jv_j);
    let h_ck = pre * dnl_dtk;

    let h_pose_i = h_ci * cam_from_imu_jacobian(&imu_pose_i.rotation, ext);
    let h_pose_j = h_cj * cam_from_imu_jacobian(&imu_pose_j.rotation, ext);
    let h_pose_k = h_ck * cam_from_imu_jacobian(&imu_pose_k.rotation, ext);
    let h_ext = h_ci * cam_from_ext_jacobian(&pose_i, ext)
        + h_cj * cam_from_ext_jacobian(&pose_j, ext)
        + h_ck * cam_from_ext_jacobian(&pose_k, ext);
    let h_cam = j_d_line * cam.line_intrinsics_jacobian(&n_l);

    // Sensitivities to the stored plane normals (orientation signs constant).
    let sigma_i = if n_i.dot(&obs_i.normal) >= 0.0 { 1.0 } else { -1.0 };
    let dv_dni = skew(&u) * s;
    let h_normal_i = pre
        * (r_ki * (sigma_i * pair.d_l_alpha)
            + rn * (dd_dv * dv_dni)
            + dnl_dv * dv_dni);
    let dv_dnj = -(skew(&obs_i.normal) * s) * r_rel;
    let ddl_dnj = dd_da * (-skew(&w) * r_rel) + dd_dv * dv_dnj;
    let h_normal_j = pre * (rn * ddl_dnj + dnl_dv * dv_dnj);

    Ok(LineJacobians { h_pose_i, h_pose_j, h_pose_k, h_cam, h_ext, h_normal_i, h_normal_j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::testsupport::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;

    #[test]
    fn plane_normal_basic() {
        let n =
            plane_normal(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(n, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-14);
        let f = Vector3::new(0.1, 0.2, 1.0);
        assert!(matches!(plane_normal(&f, &f), Err(ModelError::DegenerateEndpoints)));
    }

    #[test]
    fn plane_normal_orthogonality() {
        let mut rng = rng(200);
        for _ in 0..100 {
            let fs = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), 1.0);
            let fe = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), 1.0);
            if (fe - fs).norm() < 1e-3 {
                continue;
            }
            let n = plane_normal(&fs, &fe).unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&fs).abs() < 1e-12);
            assert!(n.dot(&fe).abs() < 1e-12);
        }
    }

    fn worked_scene() -> (Pose, Pose, LineObservation, LineObservation, CameraIntrinsics) {
        // Line {(t, 0, 2)}, camera i at the origin, camera j shifted +0.5 in y.
        let cam = CameraIntrinsics::pinhole(400.0, 400.0, 320.0, 240.0);
        let pose_i = Pose::identity();
        let pose_j = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.5, 0.0));
        let obs_i = LineObservation::from_normalized(
            0,
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.5, 0.0, 1.0),
            &cam,
        )
        .unwrap();
        // Same two line points (0,0,2) and (1,0,2) seen from camera j.
        let obs_j = LineObservation::from_normalized(
            1,
            Vector3::new(0.0, -0.25, 1.0),
            Vector3::new(0.5, -0.25, 1.0),
            &cam,
        )
        .unwrap();
        (pose_i, pose_j, obs_i, obs_j, cam)
    }

    #[test]
    fn direction_worked_example() {
        let (pose_i, pose_j, obs_i, obs_j, _) = worked_scene();
        let (_, _, v_e) = direction_from_pair(&pose_i, &pose_j, &obs_i, &obs_j).unwrap();
        assert_abs_diff_eq!(v_e, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert!(v_e.dot(&obs_i.normal).abs() < 1e-10);
    }

    #[test]
    fn direction_identical_poses_degenerate() {
        let (pose_i, _, obs_i, _, cam) = worked_scene();
        let obs_same = LineObservation::from_normalized(
            1,
            obs_i.f_start,
            obs_i.f_end,
            &cam,
        )
        .unwrap();
        assert!(matches!(
            direction_from_pair(&pose_i, &pose_i, &obs_i, &obs_same),
            Err(ModelError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn distance_worked_example() {
        let (pose_i, pose_j, obs_i, obs_j, _) = worked_scene();
        let pair = line_pair_geometry(&pose_i, &pose_j, &obs_i, &obs_j).unwrap();
        assert_abs_diff_eq!(pair.d_l, 2.0, epsilon = 1e-12);
        assert!(!pair.distance_degenerate);
        assert!(pair.d_l >= 0.0);
    }

    #[test]
    fn distance_zero_baseline_flags_unobservable() {
        let (pose_i, _, obs_i, obs_j, _) = worked_scene();
        // Same position, small rotation: numerator vanishes with the baseline.
        let pose_j = Pose::new(
            Rotation::from_scaled_axis(Vector3::new(0.0, 0.2, 0.0)),
            pose_i.position,
        );
        let v_alpha = Vector3::new(1.0, 0.0, 0.0);
        let (_, d_l, unobservable) =
            distance_from_pair(&pose_i, &pose_j, &obs_i, &obs_j, &v_alpha).unwrap();
        assert_eq!(d_l, 0.0);
        assert!(unobservable);
    }

    #[test]
    fn recovery_on_random_scenes() {
        let mut rng = rng(201);
        let mut checked = 0;
        while checked < 100 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let pair = match line_pair_geometry(
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.obs[0],
                &scene.obs[1],
            ) {
                Ok(p) => p,
                Err(_) => continue,
            };
            // Direction matches the generating line, oriented start->end.
            let expected_dir = scene.cam_pose(0).rotation.rotate(&scene.direction());
            assert!((pair.v_e - expected_dir).norm() < 1e-9);
            assert!(pair.v_e.dot(&scene.obs[0].normal).abs() < 1e-10);

            // Distance matches the point-to-line oracle in the world frame.
            let to_cam = scene.cam_pose(0).position - scene.line_start;
            let d_true = (to_cam - scene.direction() * to_cam.dot(&scene.direction())).norm();
            assert!((pair.d_l - d_true).abs() / d_true < 1e-9);
            checked += 1;
        }
    }

    /// Moment-oriented normal of an observation for a given frame direction.
    fn oriented_normal(obs: &LineObservation, v_in_frame: &Vector3<f64>) -> Vector3<f64> {
        let m = skew(&obs.f_start) * v_in_frame;
        obs.normal * m.dot(&obs.normal).signum()
    }

    #[test]
    fn two_view_and_multi_pair_constraints() {
        let mut rng = rng(202);
        let mut checked = 0;
        while checked < 100 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let (pi, pj, pk) = (scene.cam_pose(0), scene.cam_pose(1), scene.cam_pose(2));
            let pair_ij = match line_pair_geometry(&pi, &pj, &scene.obs[0], &scene.obs[1]) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let pair_ji = match line_pair_geometry(&pj, &pi, &scene.obs[1], &scene.obs[0]) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let pair_ik = match line_pair_geometry(&pi, &pk, &scene.obs[0], &scene.obs[2]) {
                Ok(p) => p,
                Err(_) => continue,
            };

            // Two-view pose-only constraint with moment-oriented normals.
            let r_ij = pi.rotation.matrix() * pj.rotation.matrix().transpose();
            let p_ij = pi.rotation.rotate(&(pj.position - pi.position));
            let n_i = pair_ij.oriented_normal_i;
            let v_j = r_ij.transpose() * pair_ij.v_e;
            let n_j = oriented_normal(&scene.obs[1], &v_j);
            let residual =
                n_i * pair_ij.d_l - r_ij * n_j * pair_ji.d_l - skew(&p_ij) * pair_ij.v_e;
            assert!(residual.norm() < 1e-9, "two-view residual {}", residual.norm());

            // Multi-pair consistency: same direction and distance from (i,k).
            assert!((pair_ij.v_e - pair_ik.v_e).norm() < 1e-9);
            assert!((pair_ij.d_l - pair_ik.d_l).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn predicted_line_contains_projections() {
        let mut rng = rng(203);
        let mut checked = 0;
        while checked < 60 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let (pi, pj, pk) = (scene.cam_pose(0), scene.cam_pose(1), scene.cam_pose(2));
            let pair = match line_pair_geometry(&pi, &pj, &scene.obs[0], &scene.obs[1]) {
                Ok(p) => p,
                Err(_) => continue,
            };

            // Anchor-frame self-consistency: the frame-i endpoints lie on the
            // predicted normalized line when k = i.
            let line_i = predict_line_in_frame(&pi, &pi, &pair, &scene.cam).unwrap();
            let n_norm = scene.cam.line_projection_matrix().try_inverse().unwrap() * line_i;
            let scale = n_norm.norm();
            assert!(scene.obs[0].f_start.dot(&n_norm).abs() / scale < 1e-9);
            assert!(scene.obs[0].f_end.dot(&n_norm).abs() / scale < 1e-9);

            // Third view: both true projected endpoints lie on the line.
            let line_k = predict_line_in_frame(&pi, &pk, &pair, &scene.cam).unwrap();
            let r = line_residual(&scene.obs[2], &line_k).unwrap();
            assert!(r.norm() < 1e-8, "incidence residual {}", r.norm());

            // Pure translation along the line direction leaves the line fixed.
            let dir_world = scene.direction();
            let pk_shift = Pose::new(pk.rotation, pk.position + dir_world * 0.4);
            let line_shift = predict_line_in_frame(&pi, &pk_shift, &pair, &scene.cam).unwrap();
            let r_shift = line_residual(&scene.obs[2], &line_shift).unwrap();
            assert!((r_shift - r).norm() < 1e-8);
            checked += 1;
        }
    }

    #[test]
    fn residual_axis_aligned_case() {
        let cam = CameraIntrinsics::pinhole(1.0, 1.0, 0.0, 0.0);
        // Vertical pixel line x = 320.
        let line = Vector3::new(1.0, 0.0, -320.0);
        let obs = LineObservation::from_normalized(
            0,
            Vector3::new(321.0, 100.0, 1.0),
            Vector3::new(321.0, 200.0, 1.0),
            &cam,
        )
        .unwrap();
        let r = line_residual(&obs, &line).unwrap();
        assert_abs_diff_eq!(r, Vector2::new(-1.0, -1.0), epsilon = 1e-12);

        // Endpoints exactly on the line.
        let on = LineObservation::from_normalized(
            0,
            Vector3::new(320.0, 100.0, 1.0),
            Vector3::new(320.0, 200.0, 1.0),
            &cam,
        )
        .unwrap();
        assert_abs_diff_eq!(
            line_residual(&on, &line).unwrap(),
            Vector2::zeros(),
            epsilon = 1e-12
        );

        assert!(matches!(
            line_residual(&obs, &Vector3::new(0.0, 0.0, 1.0)),
            Err(ModelError::DegenerateLine)
        ));
    }

    #[test]
    fn residual_matches_scalar_distance_oracle() {
        let mut rng = rng(204);
        for _ in 0..100 {
            let cam = CameraIntrinsics::pinhole(1.0, 1.0, 0.0, 0.0);
            let line: Vector3<f64> = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-100.0..100.0),
            );
            if (line.x * line.x + line.y * line.y).sqrt() < 1e-3 {
                continue;
            }
            let s = Vector3::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), 1.0);
            let e = Vector3::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), 1.0);
            if (e - s).norm() < 1.0 {
                continue;
            }
            let obs = LineObservation::from_normalized(0, s, e, &cam).unwrap();
            let r = line_residual(&obs, &line).unwrap();
            // Scalar point-to-line distance oracle.
            let dist = |p: &Vector3<f64>| {
                (line.x * p.x + line.y * p.y + line.z) / (line.x * line.x + line.y * line.y).sqrt()
            };
            assert_abs_diff_eq!(r.x, -dist(&s), epsilon = 1e-12);
            assert_abs_diff_eq!(r.y, -dist(&e), epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = rng(205);
        let mut checked = 0;
        while checked < 25 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let jac = match line_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.obs[0],
                &scene.obs[1],
                &scene.obs[2],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let predict = |poses: [&Pose; 3], cam: &CameraIntrinsics, ext: &Extrinsics| {
                predict_endpoint_distances(
                    &ext.camera_pose_from_imu(poses[0]),
                    &ext.camera_pose_from_imu(poses[1]),
                    &ext.camera_pose_from_imu(poses[2]),
                    &scene.obs[0],
                    &scene.obs[1],
                    &scene.obs[2],
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
                assert_jacobian_close(&to_dyn(analytic), &fd, 1e-4, &format!("line pose {which}"));
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
            assert_jacobian_close(&to_dyn(&jac.h_cam), &fd_cam, 1e-4, "line cam");
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
            assert_jacobian_close(&to_dyn(&jac.h_ext), &fd_ext, 1e-4, "line ext");
            checked += 1;
        }
    }

    #[test]
    fn common_translation_invariance() {
        let mut rng = rng(206);
        let mut checked = 0;
        while checked < 20 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let jac = match line_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.obs[0],
                &scene.obs[1],
                &scene.obs[2],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let t = random_vec(&mut rng, -1.0, 1.0);
            let shift = |p: &Pose| Pose::new(p.rotation, p.position + t);
            let d0 = predict_endpoint_distances(
                &scene.cam_pose(0),
                &scene.cam_pose(1),
                &scene.cam_pose(2),
                &scene.obs[0],
                &scene.obs[1],
                &scene.obs[2],
                &scene.cam,
            )
            .unwrap();
            let d1 = predict_endpoint_distances(
                &shift(&scene.cam_pose(0)),
                &shift(&scene.cam_pose(1)),
                &shift(&scene.cam_pose(2)),
                &scene.obs[0],
                &scene.obs[1],
                &scene.obs[2],
                &scene.cam,
            )
            .unwrap();
            assert!((d1 - d0).norm() < 1e-8);
            let scale = jac.h_pose_i.abs().max().max(jac.h_pose_j.abs().max()).max(1.0);
            let sum = (jac.h_pose_i.fixed_view::<2, 3>(0, 3)
                + jac.h_pose_j.fixed_view::<2, 3>(0, 3)
                + jac.h_pose_k.fixed_view::<2, 3>(0, 3))
                * t;
            assert!(sum.norm() < 1e-8 * scale);
            checked += 1;
        }
    }

    #[test]
    fn normal_sensitivities_match_finite_differences() {
        let mut rng = rng(207);
        let mut checked = 0;
        while checked < 20 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let jac = match line_jacobians(
                &scene.imu_poses[0],
                &scene.imu_poses[1],
                &scene.imu_poses[2],
                &scene.obs[0],
                &scene.obs[1],
                &scene.obs[2],
                &scene.cam,
                &scene.ext,
            ) {
                Ok(j) => j,
                Err(_) => continue,
            };
            let h = 1e-7;
            for (which, analytic) in [(0usize, &jac.h_normal_i), (1usize, &jac.h_normal_j)] {
                let mut fd = nalgebra::DMatrix::zeros(2, 3);
                for col in 0..3 {
                    let predict = |sign: f64| {
                        let mut obs =
                            [scene.obs[0].clone(), scene.obs[1].clone(), scene.obs[2].clone()];
                        obs[which].normal[col] += sign * h;
                        predict_endpoint_distances(
                            &scene.cam_pose(0),
                            &scene.cam_pose(1),
                            &scene.cam_pose(2),
                            &obs[0],
                            &obs[1],
                            &obs[2],
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
                    &format!("line normal {which}"),
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn normal_covariance_is_psd_and_scales() {
        let mut rng = rng(208);
        let mut checked = 0;
        while checked < 20 {
            let Some(scene) = LineScene::random(&mut rng) else { continue };
            let cov = normal_covariance(&scene.obs[0], 1.0 / 460.0);
            let eig = cov.symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-15);
            let cov2 = normal_covariance(&scene.obs[0], 2.0 / 460.0);
            assert!((cov2 - cov * 4.0).norm() < 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn line_projection_jacobian_identity_intrinsics() {
        // With fx = fy = 1 and cx = cy = 0 the projection Jacobian for lines
        // reduces to the permutation-diagonal form diag-ish (fy, fx, fx*fy).
        let cam = CameraIntrinsics::pinhole(1.0, 1.0, 0.0, 0.0);
        let m = cam.line_projection_matrix();
        assert_abs_diff_eq!(m, nalgebra::Matrix3::identity(), epsilon = 1e-15);
        let cam2 = CameraIntrinsics::pinhole(2.0, 3.0, 0.0, 0.0);
        let m2 = cam2.line_projection_matrix();
        assert_abs_diff_eq!(m2[(0, 0)], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m2[(1, 1)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m2[(2, 2)], 6.0, epsilon = 1e-15);
        assert_eq!(m2[(0, 1)], 0.0);
        assert_eq!(m2[(1, 0)], 0.0);
    }
}
