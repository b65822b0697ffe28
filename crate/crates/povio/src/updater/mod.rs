//! Measurement assembly and EKF update.
//!
//! Pose-only blocks are built per feature against the current frame (one
//! 2-row block per feature per frame), gated with a per-block Mahalanobis
//! test, stacked, optionally QR-compressed, and fused without null-space
//! projection; pose-only blocks never contain feature-coordinate columns.

pub mod delayed;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::Pose;
use nalgebra::SMatrix;
use crate::pose_only::base_frames::{
    select_line_base_frames, select_point_base_frames, Rejection,
};
use crate::pose_only::line::{
    line_jacobians, line_pair_geometry, line_residual, predict_line_in_frame, LineTrack,
};
use crate::pose_only::point::{point_jacobians, PointTrack};
use crate::state::{apply_correction, Covariance, FilterState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error("innovation covariance not positive definite")]
    SingularInnovation,
    #[error("state error: {0}")]
    State(#[from] crate::state::StateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureKind {
    Point,
    Line,
}

/// Which state entry a Jacobian block refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateEntry {
    Clone(u64),
    Cam,
    Ext,
}

/// Residual and sparse Jacobian blocks for one feature in the current frame.
#[derive(Debug, Clone)]
pub struct MeasurementBlock {
    pub feature_id: u64,
    pub kind: FeatureKind,
    pub residual: Vector2<f64>,
    pub jacobians: Vec<(StateEntry, DMatrix<f64>)>,
    /// Full 2x2 measurement covariance: the isotropic pixel noise plus the
    /// first-order contribution of the base-observation noise.
    pub noise: Matrix2<f64>,
}

/// Tuning for block building and the update step.
#[derive(Debug, Clone)]
pub struct UpdaterConfig {
    /// Coefficient-of-variation threshold for base-frame selection.
    pub cov_threshold: f64,
    /// Minimum observations before a feature produces measurements.
    pub min_track_len: usize,
    pub point_noise_std_px: f64,
    pub line_noise_std_px: f64,
    /// Multiplier on the modeled measurement noise (compensates the
    /// unmodeled noise of the base-frame observations).
    pub noise_inflation: f64,
    pub chi2_gate: bool,
    pub chi2_confidence: f64,
    /// Caps on blocks fused per frame, longest tracks first.
    pub max_point_blocks: usize,
    pub max_line_blocks: usize,
    /// Candidate point pairs under this parallax are degenerate.
    pub min_pair_parallax: f64,
    /// Candidate line pairs under this plane angle (radians) are degenerate.
    pub min_pair_parallax_angle: f64,
}

impl Default for UpdaterConfig {
    fn default() -> Self {
        UpdaterConfig {
            cov_threshold: 0.25,
            min_track_len: 3,
            point_noise_std_px: 1.0,
            line_noise_std_px: 1.5,
            noise_inflation: 1.5,
            chi2_gate: true,
            chi2_confidence: 0.95,
            max_point_blocks: 120,
            max_line_blocks: 60,
            min_pair_parallax: crate::pose_only::base_frames::DEFAULT_MIN_PARALLAX,
            min_pair_parallax_angle: crate::pose_only::base_frames::DEFAULT_MIN_PARALLAX_ANGLE,
        }
    }
}

/// Reasons features produced no measurement, tallied per frame.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RejectionTally {
    pub too_short: usize,
    pub unstable: usize,
    pub degenerate: usize,
    pub gated: usize,
}

/// Per-frame update accounting.
#[derive(Debug, Clone, Default, Serialize)]
pub struct UpdateReport {
    pub frame_id: u64,
    pub timestamp: f64,
    pub point_input: usize,
    pub line_input: usize,
    pub point_accepted: usize,
    pub line_accepted: usize,
    pub point_rejections: RejectionTally,
    pub line_rejections: RejectionTally,
    pub triangulation_failures: usize,
    pub mean_chi2: f64,
    pub max_chi2: f64,
    pub correction_norm: f64,
    pub stacked_rows: usize,
}

impl UpdateReport {
    pub fn accepted(&self) -> usize {
        self.point_accepted + self.line_accepted
    }
}

fn to_dynamic<const C: usize>(m: &SMatrix<f64, 2, C>) -> DMatrix<f64> {
    DMatrix::from_fn(2, C, |r, c| m[(r, c)])
}

/// Predicted pixel with a first-order debias of the closed-form depth.
///
/// The depth denominator is the norm of a noisy cross-product vector; its
/// expectation is inflated by the perpendicular noise power, which would
/// otherwise bias every recovered depth low and systematically pump the
/// weakly observable scale direction. The correction factor is computed from
/// the configured observation noise and vanishes as the noise goes to zero.
#[allow(clippy::too_many_arguments)]
fn debiased_point_prediction(
    pose_i: &crate::geometry::Pose,
    pose_j: &crate::geometry::Pose,
    pose_k: &crate::geometry::Pose,
    f_i: &nalgebra::Vector3<f64>,
    f_j: &nalgebra::Vector3<f64>,
    cam: &crate::geometry::CameraIntrinsics,
    sigma_px: f64,
) -> Result<Vector2<f64>, crate::pose_only::ModelError> {
    use crate::geometry::skew;
    use crate::pose_only::point::{reconstruct_point, MIN_FORWARD_DEPTH};
    use crate::pose_only::ModelError;

    let r_j = pose_j.rotation.matrix();
    let p_ji = r_j * (pose_i.position - pose_j.position);
    let r_rel = r_j * pose_i.rotation.matrix().transpose();
    let a_vec = -skew(f_j) * p_ji;
    let b_vec = skew(f_j) * (r_rel * f_i);
    let (na, nb) = (a_vec.norm(), b_vec.norm());
    if nb < crate::pose_only::point::DEGENERACY_FLOOR {
        return Err(ModelError::DegenerateGeometry("zero parallax denominator"));
    }
    let depth_raw = na / nb;
    if depth_raw <= MIN_FORWARD_DEPTH || na < crate::pose_only::point::DEGENERACY_FLOOR {
        return Err(ModelError::DegenerateGeometry("non-positive recovered depth"));
    }

    // Perpendicular noise power of the numerator and denominator vectors,
    // first order in the normalized observation noise.
    let (su, sv) = (sigma_px / cam.fx, sigma_px / cam.fy);
    let e_uv = SMatrix::<f64, 3, 2>::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let b_from_fi = skew(f_j) * r_rel * e_uv;
    let b_from_fj = -skew(&(r_rel * f_i)) * e_uv;
    let a_from_fj = skew(&p_ji) * e_uv;
    let perp_power = |v: &nalgebra::Vector3<f64>, jacs: &[&SMatrix<f64, 3, 2>]| {
        let unit = v / v.norm();
        let mut total = 0.0;
        for j in jacs {
            for (col, s2) in [(0, su * su), (1, sv * sv)] {
                let c = j.column(col);
                total += s2 * (c.norm_squared() - c.dot(&unit).powi(2));
            }
        }
        total
    };
    let gamma_b = perp_power(&b_vec, &[&b_from_fi, &b_from_fj]) / (2.0 * nb * nb);
    let gamma_a = perp_power(&a_vec, &[&a_from_fj]) / (2.0 * na * na);
    let depth = depth_raw * (1.0 + gamma_b - gamma_a);

    let world = reconstruct_point(pose_i, f_i, depth);
    let in_k = pose_k.transform_to_frame(&world);
    if in_k.z <= MIN_FORWARD_DEPTH {
        return Err(ModelError::BehindCamera(in_k.z));
    }
    let normalized = nalgebra::Vector3::new(in_k.x / in_k.z, in_k.y / in_k.z, 1.0);
    Ok(cam.project_and_distort(&normalized))
}

fn chi2_quantile(dof: usize, confidence: f64) -> f64 {
    use std::cell::RefCell;
    thread_local! {
        static CACHE: RefCell<BTreeMap<(usize, u64), f64>> = RefCell::new(BTreeMap::new());
    }
    CACHE.with(|c| {
        *c.borrow_mut().entry((dof, confidence.to_bits())).or_insert_with(|| {
            ChiSquared::new(dof as f64).unwrap().inverse_cdf(confidence)
        })
    })
}

/// Camera poses of all clones, keyed by frame id.
pub fn clone_camera_poses(state: &FilterState) -> BTreeMap<u64, Pose> {
    state
        .clones
        .iter()
        .map(|c| (c.frame_id, state.ext.camera_pose_from_imu(&c.pose)))
        .collect()
}

fn block_jacobians(
    state: &FilterState,
    triple: (u64, u64, u64),
    h_i: DMatrix<f64>,
    h_j: DMatrix<f64>,
    h_k: DMatrix<f64>,
    h_cam: DMatrix<f64>,
    h_ext: DMatrix<f64>,
) -> Vec<(StateEntry, DMatrix<f64>)> {
    let mut jacobians = vec![
        (StateEntry::Clone(triple.0), h_i),
        (StateEntry::Clone(triple.1), h_j),
        (StateEntry::Clone(triple.2), h_k),
    ];
    if state.calibrate_cam {
        jacobians.push((StateEntry::Cam, h_cam));
    }
    if state.calibrate_ext {
        jacobians.push((StateEntry::Ext, h_ext));
    }
    jacobians
}

/// Build immediate pose-only point blocks for the current frame.
///
/// Tracks must be pruned to the clone window. Eligible tracks are processed
/// longest first up to the per-frame cap.
pub fn build_point_blocks(
    tracks: &BTreeMap<u64, PointTrack>,
    state: &FilterState,
    cfg: &UpdaterConfig,
    current_frame: u64,
) -> (Vec<MeasurementBlock>, RejectionTally) {
    let poses = clone_camera_poses(state);
    let mut tally = RejectionTally::default();
    let mut eligible: Vec<&PointTrack> = Vec::new();
    for track in tracks.values() {
        if track.get(current_frame).is_none() {
            continue;
        }
        if track.len() < cfg.min_track_len {
            tally.too_short += 1;
            continue;
        }
        eligible.push(track);
    }
    eligible.sort_by(|a, b| b.len().cmp(&a.len()).then(a.feature_id.cmp(&b.feature_id)));

    let mut blocks = Vec::new();
    for track in eligible {
        if blocks.len() >= cfg.max_point_blocks {
            break;
        }
        let triple = match select_point_base_frames(track, &poses, cfg.cov_threshold, cfg.min_pair_parallax) {
            Ok(t) => t,
            Err(Rejection::TooShort(_)) => {
                tally.too_short += 1;
                continue;
            }
            Err(Rejection::UnstableFeature(_)) => {
                tally.unstable += 1;
                continue;
            }
            Err(Rejection::AllDegenerate) => {
                tally.degenerate += 1;
                continue;
            }
        };
        debug_assert_eq!(triple.k, current_frame);
        let f_i = track.get(triple.i).unwrap().normalized;
        let f_j = track.get(triple.j).unwrap().normalized;
        let obs_k = track.get(triple.k).unwrap();
        let residual = match debiased_point_prediction(
            &poses[&triple.i],
            &poses[&triple.j],
            &poses[&triple.k],
            &f_i,
            &f_j,
            &state.cam,
            cfg.point_noise_std_px,
        ) {
            Ok(predicted) => obs_k.pixel - predicted,
            Err(_) => {
                tally.degenerate += 1;
                continue;
            }
        };
        let clone_i = state.clones.by_frame(triple.i).unwrap().pose;
        let clone_j = state.clones.by_frame(triple.j).unwrap().pose;
        let clone_k = state.clones.by_frame(triple.k).unwrap().pose;
        let jac = match point_jacobians(
            &clone_i, &clone_j, &clone_k, &f_i, &f_j, &state.cam, &state.ext,
        ) {
            Ok(j) => j,
            Err(_) => {
                tally.degenerate += 1;
                continue;
            }
        };
        let sigma_f = Matrix2::new(
            (cfg.point_noise_std_px / state.cam.fx).powi(2),
            0.0,
            0.0,
            (cfg.point_noise_std_px / state.cam.fy).powi(2),
        );
        let noise = (Matrix2::identity() * cfg.point_noise_std_px.powi(2)
            + jac.h_base_i * sigma_f * jac.h_base_i.transpose()
            + jac.h_base_j * sigma_f * jac.h_base_j.transpose())
            * cfg.noise_inflation.powi(2);
        blocks.push(MeasurementBlock {
            feature_id: track.feature_id,
            kind: FeatureKind::Point,
            residual,
            jacobians: block_jacobians(
                state,
                (triple.i, triple.j, triple.k),
                to_dynamic(&jac.h_pose_i),
                to_dynamic(&jac.h_pose_j),
                to_dynamic(&jac.h_pose_k),
                to_dynamic(&jac.h_cam),
                to_dynamic(&jac.h_ext),
            ),
            noise,
        });
    }
    (blocks, tally)
}

/// Build immediate pose-only line blocks for the current frame.
pub fn build_line_blocks(
    tracks: &BTreeMap<u64, LineTrack>,
    state: &FilterState,
    cfg: &UpdaterConfig,
    current_frame: u64,
) -> (Vec<MeasurementBlock>, RejectionTally) {
    let poses = clone_camera_poses(state);
    let mut tally = RejectionTally::default();
    let mut eligible: Vec<&LineTrack> = Vec::new();
    for track in tracks.values() {
        if track.get(current_frame).is_none() {
            continue;
        }
        if track.len() < cfg.min_track_len {
            tally.too_short += 1;
            continue;
        }
        eligible.push(track);
    }
    eligible.sort_by(|a, b| b.len().cmp(&a.len()).then(a.feature_id.cmp(&b.feature_id)));

    let mut blocks = Vec::new();
    for track in eligible {
        if blocks.len() >= cfg.max_line_blocks {
            break;
        }
        let triple = match select_line_base_frames(track, &poses, cfg.cov_threshold, cfg.min_pair_parallax_angle) {
            Ok(t) => t,
            Err(Rejection::TooShort(_)) => {
                tally.too_short += 1;
                continue;
            }
            Err(Rejection::UnstableFeature(_)) => {
                tally.unstable += 1;
                continue;
            }
            Err(Rejection::AllDegenerate) => {
                tally.degenerate += 1;
                continue;
            }
        };
        let obs_i = track.get(triple.i).unwrap();
        let obs_j = track.get(triple.j).unwrap();
        let obs_k = track.get(triple.k).unwrap();
        let residual = match line_pair_geometry(&poses[&triple.i], &poses[&triple.j], obs_i, obs_j)
            .and_then(|pair| {
                if pair.distance_degenerate {
                    return Err(crate::pose_only::ModelError::DegenerateGeometry(
                        "unobservable line distance",
                    ));
                }
                let line =
                    predict_line_in_frame(&poses[&triple.i], &poses[&triple.k], &pair, &state.cam)?;
                line_residual(obs_k, &line)
            }) {
            Ok(r) => r,
            Err(_) => {
                tally.degenerate += 1;
                continue;
            }
        };
        let clone_i = state.clones.by_frame(triple.i).unwrap().pose;
        let clone_j = state.clones.by_frame(triple.j).unwrap().pose;
        let clone_k = state.clones.by_frame(triple.k).unwrap().pose;
        let jac = match line_jacobians(
            &clone_i, &clone_j, &clone_k, obs_i, obs_j, obs_k, &state.cam, &state.ext,
        ) {
            Ok(j) => j,
            Err(_) => {
                tally.degenerate += 1;
                continue;
            }
        };
        let sigma_norm = cfg.line_noise_std_px / (0.5 * (state.cam.fx + state.cam.fy));
        let cov_ni = crate::pose_only::line::normal_covariance(obs_i, sigma_norm);
        let cov_nj = crate::pose_only::line::normal_covariance(obs_j, sigma_norm);
        let noise = (Matrix2::identity() * cfg.line_noise_std_px.powi(2)
            + jac.h_normal_i * cov_ni * jac.h_normal_i.transpose()
            + jac.h_normal_j * cov_nj * jac.h_normal_j.transpose())
            * cfg.noise_inflation.powi(2);
        blocks.push(MeasurementBlock {
            feature_id: track.feature_id,
            kind: FeatureKind::Line,
            residual,
            jacobians: block_jacobians(
                state,
                (triple.i, triple.j, triple.k),
                to_dynamic(&jac.h_pose_i),
                to_dynamic(&jac.h_pose_j),
                to_dynamic(&jac.h_pose_k),
                to_dynamic(&jac.h_cam),
                to_dynamic(&jac.h_ext),
            ),
            noise,
        });
    }
    (blocks, tally)
}

/// A dense stacked measurement system.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub h: DMatrix<f64>,
    pub residual: DVector<f64>,
    /// Per-row noise variances.
    pub noise: DVector<f64>,
}

impl StackedSystem {
    pub fn rows(&self) -> usize {
        self.residual.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GateStats {
    pub accepted_points: usize,
    pub accepted_lines: usize,
    pub rejected_points: usize,
    pub rejected_lines: usize,
    pub mean_chi2: f64,
    pub max_chi2: f64,
}

fn column_offset(state: &FilterState, entry: &StateEntry) -> Option<usize> {
    match entry {
        StateEntry::Clone(frame) => state.clone_offset_by_frame(*frame),
        StateEntry::Cam => state.cam_offset(),
        StateEntry::Ext => state.ext_offset(),
    }
}

/// Per-block Mahalanobis gate followed by row-stacking of the survivors.
pub fn gate_and_stack(
    blocks: &[MeasurementBlock],
    state: &FilterState,
    cov: &Covariance,
    cfg: &UpdaterConfig,
) -> (StackedSystem, GateStats) {
    let dim = state.error_dim();
    let p = cov.as_matrix();
    let mut stats = GateStats::default();
    let mut survivors: Vec<&MeasurementBlock> = Vec::new();
    let mut chi2_sum = 0.0;
    let threshold = chi2_quantile(2, cfg.chi2_confidence);

    'block: for block in blocks {
        let mut offsets = Vec::with_capacity(block.jacobians.len());
        for (entry, jac) in &block.jacobians {
            match column_offset(state, entry) {
                Some(off) => offsets.push((off, jac)),
                None => {
                    // Referenced clone vanished: drop the block.
                    match block.kind {
                        FeatureKind::Point => stats.rejected_points += 1,
                        FeatureKind::Line => stats.rejected_lines += 1,
                    }
                    continue 'block;
                }
            }
        }
        if cfg.chi2_gate {
            // S = sum_a sum_b H_a P_ab H_b^T + R.
            let mut s = block.noise;
            for (off_a, jac_a) in &offsets {
                for (off_b, jac_b) in &offsets {
                    let pab = p.view((*off_a, *off_b), (jac_a.ncols(), jac_b.ncols()));
                    let prod = *jac_a * pab * jac_b.transpose();
                    for r in 0..2 {
                        for c in 0..2 {
                            s[(r, c)] += prod[(r, c)];
                        }
                    }
                }
            }
            let gamma = match s.try_inverse() {
                Some(inv) => (block.residual.transpose() * inv * block.residual)[(0, 0)],
                None => f64::INFINITY,
            };
            chi2_sum += gamma;
            stats.max_chi2 = stats.max_chi2.max(gamma);
            if gamma > threshold {
                match block.kind {
                    FeatureKind::Point => stats.rejected_points += 1,
                    FeatureKind::Line => stats.rejected_lines += 1,
                }
                continue;
            }
        }
        match block.kind {
            FeatureKind::Point => stats.accepted_points += 1,
            FeatureKind::Line => stats.accepted_lines += 1,
        }
        survivors.push(block);
    }
    if !blocks.is_empty() {
        stats.mean_chi2 = chi2_sum / blocks.len() as f64;
    }

    // Whiten each block with the Cholesky factor of its covariance so the
    // stacked system carries unit noise.
    let rows = 2 * survivors.len();
    let mut h = DMatrix::zeros(rows, dim);
    let mut residual = DVector::zeros(rows);
    let noise = DVector::from_element(rows, 1.0);
    for (idx, block) in survivors.iter().enumerate() {
        let row = 2 * idx;
        let chol = nalgebra::Cholesky::new(block.noise)
            .unwrap_or_else(|| nalgebra::Cholesky::new(Matrix2::identity()).unwrap());
        let inv_l = chol.l().try_inverse().expect("triangular factor invertible");
        let wr = inv_l * block.residual;
        residual[row] = wr.x;
        residual[row + 1] = wr.y;
        for (entry, jac) in &block.jacobians {
            let off = column_offset(state, entry).expect("validated above");
            let white = inv_l * jac;
            h.view_mut((row, off), (2, jac.ncols())).copy_from(&white);
        }
    }
    (StackedSystem { h, residual, noise }, stats)
}

/// Outcome of one EKF update.
#[derive(Debug, Clone, Default)]
pub struct UpdateOutcome {
    pub correction_norm: f64,
    pub rows: usize,
}

/// Standard EKF update with QR compression of tall systems and a Joseph-form
/// covariance update.
pub fn ekf_update(
    state: &mut FilterState,
    cov: &mut Covariance,
    system: &StackedSystem,
) -> Result<UpdateOutcome, UpdateError> {
    let rows = system.rows();
    if rows == 0 {
        return Ok(UpdateOutcome::default());
    }
    let dim = state.error_dim();
    debug_assert_eq!(system.h.ncols(), dim);

    // Whiten rows so compression and the update see unit noise.
    let mut h = system.h.clone();
    let mut r = system.residual.clone();
    for row in 0..rows {
        let s = system.noise[row].sqrt();
        for col in 0..dim {
            h[(row, col)] /= s;
        }
        r[row] /= s;
    }
    if rows > dim {
        let qr = h.qr();
        let q = qr.q();
        h = qr.r();
        r = q.transpose() * r;
    }

    let p = cov.as_matrix().clone();
    let hp = &h * &p;
    let s = &hp * h.transpose() + DMatrix::identity(h.nrows(), h.nrows());
    let chol = s.clone().cholesky().ok_or(UpdateError::SingularInnovation)?;
    let k = chol.solve(&hp).transpose();
    let dx = &k * &r;
    apply_correction(state, &dx)?;

    let ikh = DMatrix::identity(dim, dim) - &k * &h;
    let joseph = &ikh * &p * ikh.transpose() + &k * k.transpose();
    *cov = Covariance::from_matrix(joseph);
    Ok(UpdateOutcome { correction_norm: dx.norm(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Extrinsics};
    use crate::state::{augment_clone, ImuState};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;

    fn state_with_clones(n: usize) -> (FilterState, Covariance) {
        let mut state = FilterState::new(
            ImuState::default(),
            11,
            CameraIntrinsics::pinhole(400.0, 400.0, 320.0, 240.0),
            Extrinsics::identity(),
        );
        let mut cov = Covariance::zeros(state.error_dim());
        for i in 0..n {
            state.imu.position = Vector3::new(0.3 * i as f64, 0.0, 0.0);
            augment_clone(&mut state, &mut cov, i as u64, i as f64 * 0.05).unwrap();
        }
        let d = state.error_dim();
        *cov.as_matrix_mut() = DMatrix::identity(d, d) * 1e-4;
        (state, cov)
    }

    #[test]
    fn chi2_quantile_matches_reference() {
        // 95% quantile of chi-square with 2 dof.
        assert_abs_diff_eq!(chi2_quantile(2, 0.95), 5.991464547107979, epsilon = 1e-9);
    }

    #[test]
    fn gate_rejects_huge_residual_and_stack_matches_concatenation() {
        let (state, cov) = state_with_clones(3);
        let cfg = UpdaterConfig::default();
        let dim = state.error_dim();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let mk_block = |id: u64, residual: Vector2<f64>, rng: &mut rand_chacha::ChaCha20Rng| {
            let jac = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
            MeasurementBlock {
                feature_id: id,
                kind: FeatureKind::Point,
                residual,
                jacobians: vec![
                    (StateEntry::Clone(0), jac.clone()),
                    (StateEntry::Clone(2), jac),
                ],
                noise: Matrix2::identity(),
            }
        };
        let good = mk_block(1, Vector2::new(0.1, -0.2), &mut rng);
        let bad = mk_block(2, Vector2::new(100.0, 100.0), &mut rng);
        let (system, stats) = gate_and_stack(&[good.clone(), bad], &state, &cov, &cfg);
        assert_eq!(stats.accepted_points, 1);
        assert_eq!(stats.rejected_points, 1);
        assert_eq!(system.rows(), 2);

        // Concatenation oracle for the survivor.
        let mut expected = DMatrix::zeros(2, dim);
        for (entry, jac) in &good.jacobians {
            let off = column_offset(&state, entry).unwrap();
            expected.view_mut((0, off), (2, 6)).copy_from(jac);
        }
        assert_abs_diff_eq!(system.h, expected, epsilon = 1e-14);
        assert_eq!(system.residual[0], 0.1);
        assert_eq!(system.residual[1], -0.2);
    }

    #[test]
    fn gate_drops_blocks_referencing_missing_clones() {
        let (state, cov) = state_with_clones(2);
        let cfg = UpdaterConfig::default();
        let block = MeasurementBlock {
            feature_id: 5,
            kind: FeatureKind::Line,
            residual: Vector2::new(0.0, 0.0),
            jacobians: vec![(StateEntry::Clone(99), DMatrix::zeros(2, 6))],
            noise: Matrix2::identity(),
        };
        let (system, stats) = gate_and_stack(&[block], &state, &cov, &cfg);
        assert_eq!(system.rows(), 0);
        assert_eq!(stats.rejected_lines, 1);
    }

    #[test]
    fn scalar_kalman_textbook_case() {
        // 1-D system embedded in the position-x entry: P = 1, H = 1, R = 1,
        // r = 1 must produce a gain of 1/2.
        let (mut state, mut cov) = state_with_clones(1);
        let dim = state.error_dim();
        *cov.as_matrix_mut() = DMatrix::zeros(dim, dim);
        cov.as_matrix_mut()[(3, 3)] = 1.0;
        let mut h = DMatrix::zeros(1, dim);
        h[(0, 3)] = 1.0;
        let system = StackedSystem {
            h,
            residual: DVector::from_element(1, 1.0),
            noise: DVector::from_element(1, 1.0),
        };
        let before = state.imu.position;
        let outcome = ekf_update(&mut state, &mut cov, &system).unwrap();
        assert_abs_diff_eq!(state.imu.position.x - before.x, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cov.as_matrix()[(3, 3)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(outcome.correction_norm, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_residual_update_is_identity_on_state() {
        let (mut state, mut cov) = state_with_clones(3);
        let dim = state.error_dim();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.1..0.1));
        *cov.as_matrix_mut() = &a * a.transpose() + DMatrix::identity(dim, dim) * 1e-6;
        let h = DMatrix::from_fn(8, dim, |_, _| rng.random_range(-1.0..1.0));
        let system = StackedSystem {
            h,
            residual: DVector::zeros(8),
            noise: DVector::from_element(8, 1.0),
        };
        let before = state.imu.position;
        let tr_before = cov.trace();
        ekf_update(&mut state, &mut cov, &system).unwrap();
        assert_abs_diff_eq!(state.imu.position, before, epsilon = 1e-15);
        assert!(cov.trace() <= tr_before + 1e-12);
        assert!(cov.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn joseph_form_matches_direct_formula() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let (mut state, mut cov) = state_with_clones(2);
        let dim = state.error_dim();
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.3..0.3));
        let p0 = &a * a.transpose() + DMatrix::identity(dim, dim) * 1e-3;
        *cov.as_matrix_mut() = p0.clone();
        let h = DMatrix::from_fn(6, dim, |_, _| rng.random_range(-0.5..0.5));
        let sigma2 = 0.7;
        let system = StackedSystem {
            h: h.clone(),
            residual: DVector::from_fn(6, |_, _| rng.random_range(-0.05..0.05)),
            noise: DVector::from_element(6, sigma2),
        };
        ekf_update(&mut state, &mut cov, &system).unwrap();

        // Direct-formula oracle in unwhitened coordinates.
        let r_mat = DMatrix::identity(6, 6) * sigma2;
        let s = &h * &p0 * h.transpose() + &r_mat;
        let k = &p0 * h.transpose() * s.try_inverse().unwrap();
        let ikh = DMatrix::identity(dim, dim) - &k * &h;
        let expected = &ikh * &p0 * ikh.transpose() + &k * &r_mat * k.transpose();
        let diff = (cov.as_matrix() - &expected).abs().max();
        assert!(diff < 1e-10, "joseph mismatch {diff}");
    }

    #[test]
    fn qr_compression_preserves_the_update() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let (state0, mut cov0) = state_with_clones(2);
        let dim = state0.error_dim();
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.3..0.3));
        let p0 = &a * a.transpose() + DMatrix::identity(dim, dim) * 1e-3;
        *cov0.as_matrix_mut() = p0.clone();

        // Tall system triggers compression.
        let tall = dim + 20;
        let h = DMatrix::from_fn(tall, dim, |_, _| rng.random_range(-0.5..0.5));
        let residual = DVector::from_fn(tall, |_, _| rng.random_range(-0.1..0.1));
        let system = StackedSystem {
            h: h.clone(),
            residual: residual.clone(),
            noise: DVector::from_element(tall, 0.25),
        };
        let mut state_a = state0.clone();
        let mut cov_a = cov0.clone();
        ekf_update(&mut state_a, &mut cov_a, &system).unwrap();

        // Uncompressed oracle.
        let r_mat = DMatrix::identity(tall, tall) * 0.25;
        let s = &h * &p0 * h.transpose() + &r_mat;
        let k = &p0 * h.transpose() * s.try_inverse().unwrap();
        let dx = &k * &residual;
        let mut state_b = state0.clone();
        apply_correction(&mut state_b, &dx).unwrap();
        let ikh = DMatrix::identity(dim, dim) - &k * &h;
        let p_expected = &ikh * &p0 * ikh.transpose() + &k * &r_mat * k.transpose();

        assert!((state_a.imu.position - state_b.imu.position).norm() < 1e-9);
        assert!(state_a.imu.orientation.angle_to(&state_b.imu.orientation) < 1e-9);
        let diff = (cov_a.as_matrix() - &p_expected).abs().max();
        assert!(diff < 1e-9, "compressed covariance mismatch {diff}");
    }

    #[test]
    fn empty_update_is_noop() {
        let (mut state, mut cov) = state_with_clones(2);
        let dim = state.error_dim();
        let system = StackedSystem {
            h: DMatrix::zeros(0, dim),
            residual: DVector::zeros(0),
            noise: DVector::zeros(0),
        };
        let before = cov.as_matrix().clone();
        let outcome = ekf_update(&mut state, &mut cov, &system).unwrap();
        assert_eq!(outcome.rows, 0);
        assert_eq!(cov.as_matrix(), &before);
    }
}
