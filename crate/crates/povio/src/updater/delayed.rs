//! Delayed-update point baseline: triangulation when a track ends or reaches
//! the window length, per-observation residual stacking, and left null-space
//! projection of the feature-coordinate Jacobian before the EKF update.
//!
//! This is the comparison arm for the immediate pose-only path: it requires a
//! successful triangulation, so short or low-parallax tracks contribute
//! nothing, and linearization errors of the triangulated coordinates enter
//! the stacked system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector3};
use thiserror::Error;

use crate::geometry::{skew, Pose};
use crate::pose_only::base_frames::parallax_angle;
use crate::pose_only::cam_from_imu_jacobian;
use crate::pose_only::line::LineTrack;
use crate::pose_only::point::PointTrack;
use crate::state::{Covariance, FilterState};

use super::{chi2_quantile, ekf_update, StackedSystem, UpdateError, UpdaterConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriangulationFailure {
    #[error("fewer than {0} observations")]
    TooFewObservations(usize),
    #[error("rank-deficient triangulation system")]
    RankDeficient,
    #[error("triangulated point behind a camera")]
    BehindCamera,
    #[error("refinement diverged")]
    Diverged,
}

/// Linear (DLT) triangulation followed by Gauss-Newton refinement on the
/// normalized reprojection error.
pub fn triangulate_point(
    track: &PointTrack,
    poses: &BTreeMap<u64, Pose>,
) -> Result<Vector3<f64>, TriangulationFailure> {
    let obs: Vec<_> = track
        .observations()
        .iter()
        .filter(|o| poses.contains_key(&o.frame_id))
        .collect();
    if obs.len() < 3 {
        return Err(TriangulationFailure::TooFewObservations(3));
    }
    let mut a = DMatrix::zeros(2 * obs.len(), 3);
    let mut b = DVector::zeros(2 * obs.len());
    for (idx, o) in obs.iter().enumerate() {
        let pose = &poses[&o.frame_id];
        let r = pose.rotation.matrix();
        let (u, v) = (o.normalized.x, o.normalized.y);
        let row_u = u * r.row(2) - r.row(0);
        let row_v = v * r.row(2) - r.row(1);
        let rhs_u = (row_u * pose.position)[(0, 0)];
        let rhs_v = (row_v * pose.position)[(0, 0)];
        a.row_mut(2 * idx).copy_from(&row_u);
        a.row_mut(2 * idx + 1).copy_from(&row_v);
        b[2 * idx] = rhs_u;
        b[2 * idx + 1] = rhs_v;
    }
    let svd = a.clone().svd(true, true);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if smin < 1e-6 * smax.max(1.0) {
        return Err(TriangulationFailure::RankDeficient);
    }
    let mut point = svd.solve(&b, 1e-12).map_err(|_| TriangulationFailure::RankDeficient)?;
    let mut point3 = Vector3::new(point[0], point[1], point[2]);

    // Gauss-Newton refinement over the normalized reprojection residuals.
    for _ in 0..6 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = Vector3::zeros();
        let mut cost = 0.0;
        for o in &obs {
            let pose = &poses[&o.frame_id];
            let pc = pose.transform_to_frame(&point3);
            if pc.z < 1e-3 {
                return Err(TriangulationFailure::BehindCamera);
            }
            let inv_z = 1.0 / pc.z;
            let res = nalgebra::Vector2::new(
                o.normalized.x - pc.x * inv_z,
                o.normalized.y - pc.y * inv_z,
            );
            cost += res.norm_squared();
            let j_norm = SMatrix::<f64, 2, 3>::new(
                inv_z,
                0.0,
                -pc.x * inv_z * inv_z,
                0.0,
                inv_z,
                -pc.y * inv_z * inv_z,
            );
            // residual = obs - proj => d res / d X = -J_norm * R.
            let j = -j_norm * pose.rotation.matrix();
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        if !cost.is_finite() {
            return Err(TriangulationFailure::Diverged);
        }
        let Some(inv) = jtj.try_inverse() else {
            return Err(TriangulationFailure::RankDeficient);
        };
        let step = -(inv * jtr);
        point3 += step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    for o in &obs {
        if poses[&o.frame_id].transform_to_frame(&point3).z < 1e-3 {
            return Err(TriangulationFailure::BehindCamera);
        }
    }
    point = DVector::from_column_slice(point3.as_slice());
    Ok(Vector3::new(point[0], point[1], point[2]))
}

/// Left null-space projection of the feature-coordinate Jacobian: Givens
/// rotations triangularize `h_f` in place (applied jointly to `h_x` and the
/// residual) and the rows below the feature block are kept.
pub fn nullspace_project(
    h_f: &mut DMatrix<f64>,
    h_x: &mut DMatrix<f64>,
    residual: &mut DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let rows = h_f.nrows();
    let cols = h_f.ncols();
    for col in 0..cols {
        for row in (col + 1..rows).rev() {
            let (a, b) = (h_f[(row - 1, col)], h_f[(row, col)]);
            if b.abs() < 1e-300 {
                continue;
            }
            let r = a.hypot(b);
            let (c, s) = (a / r, b / r);
            for m in [&mut *h_f, &mut *h_x] {
                for k in 0..m.ncols() {
                    let top = m[(row - 1, k)];
                    let bottom = m[(row, k)];
                    m[(row - 1, k)] = c * top + s * bottom;
                    m[(row, k)] = -s * top + c * bottom;
                }
            }
            let top = residual[row - 1];
            let bottom = residual[row];
            residual[row - 1] = c * top + s * bottom;
            residual[row] = -s * top + c * bottom;
        }
    }
    let kept = rows - cols;
    (h_x.rows(cols, kept).into_owned(), residual.rows(cols, kept).into_owned())
}

/// Per-track outcome counters for the delayed path.
#[derive(Debug, Clone, Copy, Default)]
pub struct DelayedStats {
    pub fused_tracks: usize,
    pub fused_observations: usize,
    pub triangulation_failures: usize,
    pub gated_tracks: usize,
}

/// Delayed MSCKF-style point update over finished tracks.
pub fn baseline_point_update(
    state: &mut FilterState,
    cov: &mut Covariance,
    finished: &[PointTrack],
    cfg: &UpdaterConfig,
) -> Result<DelayedStats, UpdateError> {
    let mut stats = DelayedStats::default();
    let dim = state.error_dim();
    let cam_poses = super::clone_camera_poses(state);
    let mut h_all: Vec<DMatrix<f64>> = Vec::new();
    let mut r_all: Vec<DVector<f64>> = Vec::new();

    for track in finished {
        let obs: Vec<_> = track
            .observations()
            .iter()
            .filter(|o| cam_poses.contains_key(&o.frame_id))
            .collect();
        if obs.len() < cfg.min_track_len {
            stats.triangulation_failures += 1;
            continue;
        }
        let world = match triangulate_point(track, &cam_poses) {
            Ok(w) => w,
            Err(_) => {
                stats.triangulation_failures += 1;
                continue;
            }
        };

        let rows = 2 * obs.len();
        let mut h_x = DMatrix::zeros(rows, dim);
        let mut h_f = DMatrix::zeros(rows, 3);
        let mut residual = DVector::zeros(rows);
        let mut ok = true;
        for (idx, o) in obs.iter().enumerate() {
            let cam_pose = &cam_poses[&o.frame_id];
            let pc = cam_pose.transform_to_frame(&world);
            if pc.z < 1e-3 {
                ok = false;
                break;
            }
            let normalized = Vector3::new(pc.x / pc.z, pc.y / pc.z, 1.0);
            let predicted = state.cam.project_and_distort(&normalized);
            let res = o.pixel - predicted;
            let dist = state.cam.distortion_jacobian(normalized.x, normalized.y);
            let focal = Matrix2::new(state.cam.fx, 0.0, 0.0, state.cam.fy);
            let inv_z = 1.0 / pc.z;
            let j_norm = SMatrix::<f64, 2, 3>::new(
                inv_z,
                0.0,
                -pc.x * inv_z * inv_z,
                0.0,
                inv_z,
                -pc.y * inv_z * inv_z,
            );
            let j_pix_pc = focal * dist * j_norm;
            // Camera-pose block, mapped onto the IMU clone.
            let mut dpc_dt = SMatrix::<f64, 3, 6>::zeros();
            dpc_dt.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pc));
            dpc_dt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-cam_pose.rotation.matrix()));
            let clone_pose = state.clones.by_frame(o.frame_id).unwrap().pose;
            let h_pose =
                j_pix_pc * dpc_dt * cam_from_imu_jacobian(&clone_pose.rotation, &state.ext);
            let off = state.clone_offset_by_frame(o.frame_id).unwrap();
            let row = 2 * idx;
            h_x.view_mut((row, off), (2, 6)).copy_from(&to_dyn26(&h_pose));
            // Feature-coordinate block.
            let h_feat = j_pix_pc * cam_pose.rotation.matrix();
            h_f.view_mut((row, 0), (2, 3)).copy_from(&to_dyn23(&h_feat));
            residual[row] = res.x;
            residual[row + 1] = res.y;
        }
        if !ok {
            stats.triangulation_failures += 1;
            continue;
        }

        let (h_proj, r_proj) = nullspace_project(&mut h_f, &mut h_x, &mut residual);

        // Per-track Mahalanobis gate on the projected system.
        if cfg.chi2_gate {
            let sigma2 = (cfg.point_noise_std_px * cfg.noise_inflation).powi(2);
            let s = &h_proj * cov.as_matrix() * h_proj.transpose()
                + DMatrix::identity(h_proj.nrows(), h_proj.nrows()) * sigma2;
            let gamma = match s.cholesky() {
                Some(chol) => (r_proj.transpose() * chol.solve(&r_proj))[(0, 0)],
                None => f64::INFINITY,
            };
            if gamma > chi2_quantile(h_proj.nrows(), cfg.chi2_confidence) {
                stats.gated_tracks += 1;
                continue;
            }
        }
        stats.fused_tracks += 1;
        stats.fused_observations += obs.len();
        h_all.push(h_proj);
        r_all.push(r_proj);
    }

    if h_all.is_empty() {
        return Ok(stats);
    }
    let rows: usize = h_all.iter().map(|h| h.nrows()).sum();
    let mut h = DMatrix::zeros(rows, dim);
    let mut r = DVector::zeros(rows);
    let mut at = 0;
    for (hb, rb) in h_all.iter().zip(&r_all) {
        h.view_mut((at, 0), (hb.nrows(), dim)).copy_from(hb);
        r.rows_mut(at, rb.len()).copy_from(rb);
        at += hb.nrows();
    }
    let sigma2 = (cfg.point_noise_std_px * cfg.noise_inflation).powi(2);
    let system = StackedSystem { h, residual: r, noise: DVector::from_element(rows, sigma2) };
    ekf_update(state, cov, &system)?;
    Ok(stats)
}

fn to_dyn26(m: &SMatrix<f64, 2, 6>) -> DMatrix<f64> {
    DMatrix::from_fn(2, 6, |r, c| m[(r, c)])
}

fn to_dyn23(m: &SMatrix<f64, 2, 3>) -> DMatrix<f64> {
    DMatrix::from_fn(2, 3, |r, c| m[(r, c)])
}

/// Count how many observations of a finished line track a delayed trigger
/// would fuse: all of them when the track is long enough and its geometry
/// supports initialization, none otherwise.
pub fn delayed_line_fusable(
    track: &LineTrack,
    poses: &BTreeMap<u64, Pose>,
    min_track_len: usize,
    min_parallax_deg: f64,
) -> usize {
    let obs: Vec<_> = track
        .observations()
        .iter()
        .filter(|o| poses.contains_key(&o.frame_id))
        .collect();
    if obs.len() < min_track_len {
        return 0;
    }
    let mut max_angle: f64 = 0.0;
    for a in 0..obs.len() {
        for b in a + 1..obs.len() {
            let angle = parallax_angle(
                &poses[&obs[a].frame_id],
                &poses[&obs[b].frame_id],
                &obs[a].normal,
                &obs[b].normal,
            );
            max_angle = max_angle.max(angle);
        }
    }
    if max_angle.to_degrees() < min_parallax_deg {
        return 0;
    }
    obs.len()
}
