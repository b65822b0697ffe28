//! Trajectory evaluation: TUM-format I/O, timestamp association, SE(3)
//! alignment, ATE/ARE, NEES, and a paired Wilcoxon signed-rank test.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::geometry::{Pose, Rotation};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory line {0}: {1}")]
    Parse(usize, String),
    #[error("no timestamp overlap between trajectories")]
    NoOverlap,
    #[error("singular marginal covariance at sample {0}")]
    SingularCovariance(usize),
}

/// Trajectory sample: timestamp plus world->body pose.
pub type TrajPoint = (f64, Pose);

/// Parse a TUM trajectory (`timestamp tx ty tz qx qy qz qw` per line,
/// `#` comments allowed). Quaternions store the body->world rotation.
pub fn read_tum<R: Read>(reader: R) -> Result<Vec<TrajPoint>, MetricsError> {
    let mut out = Vec::new();
    for (no, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(MetricsError::Parse(no + 1, format!("expected 8 fields, got {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            v[i] = f
                .parse::<f64>()
                .map_err(|e| MetricsError::Parse(no + 1, format!("bad number {f:?}: {e}")))?;
            if !v[i].is_finite() {
                return Err(MetricsError::Parse(no + 1, format!("non-finite value {f:?}")));
            }
        }
        let (t, tx, ty, tz, qx, qy, qz, qw) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
        let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        if norm < 1e-9 {
            return Err(MetricsError::Parse(no + 1, "zero-norm quaternion".into()));
        }
        // File stores body->world; the crate's Pose rotation is world->body.
        let rotation = Rotation::from_wxyz(qw, qx, qy, qz).inverse();
        out.push((t, Pose::new(rotation, Vector3::new(tx, ty, tz))));
    }
    Ok(out)
}

/// Write a trajectory in TUM format.
pub fn write_tum<W: Write>(mut writer: W, traj: &[TrajPoint]) -> Result<(), MetricsError> {
    for (t, pose) in traj {
        let (w, x, y, z) = pose.rotation.inverse().wxyz();
        writeln!(
            writer,
            "{t:.9} {:.9} {:.9} {:.9} {x:.9} {y:.9} {z:.9} {w:.9}",
            pose.position.x, pose.position.y, pose.position.z
        )?;
    }
    Ok(())
}

/// Associate two trajectories by nearest timestamp within `max_dt`.
pub fn associate(est: &[TrajPoint], gt: &[TrajPoint], max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, (t, _)) in est.iter().enumerate() {
        while j + 1 < gt.len() && (gt[j + 1].0 - t).abs() <= (gt[j].0 - t).abs() {
            j += 1;
        }
        if !gt.is_empty() && (gt[j].0 - t).abs() <= max_dt {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Trajectory alignment mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    None,
    #[default]
    Se3FirstPose,
    Se3Umeyama,
}

/// Rigid world transform `x -> R x + t` applied to an estimated trajectory.
#[derive(Debug, Clone, Copy)]
pub struct AlignTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AlignTransform {
    pub fn identity() -> Self {
        AlignTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        // Body->world rotation composes on the left with the map rotation.
        let r_gi = pose.rotation.matrix() * self.rotation.transpose();
        Pose::new(
            Rotation::from_matrix(&r_gi),
            self.rotation * pose.position + self.translation,
        )
    }
}

fn first_pose_alignment(est: &Pose, gt: &Pose) -> AlignTransform {
    // R maps estimated body->world onto ground-truth body->world.
    let rotation = gt.rotation.matrix().transpose() * est.rotation.matrix();
    let translation = gt.position - rotation * est.position;
    AlignTransform { rotation, translation }
}

fn umeyama_alignment(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> AlignTransform {
    let n = pairs.len() as f64;
    let c_est = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let c_gt = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in pairs {
        h += (g - c_gt) * (e - c_est).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    AlignTransform { rotation, translation: c_gt - rotation * c_est }
}

/// ATE (m) and ARE (deg) as RMSE over associated poses after alignment.
pub fn compute_ate_are(
    est: &[TrajPoint],
    gt: &[TrajPoint],
    align: Alignment,
    max_dt: f64,
) -> Result<(f64, f64), MetricsError> {
    let pairs = associate(est, gt, max_dt);
    if pairs.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let transform = match align {
        Alignment::None => AlignTransform::identity(),
        Alignment::Se3FirstPose => {
            let (i, j) = pairs[0];
            first_pose_alignment(&est[i].1, &gt[j].1)
        }
        Alignment::Se3Umeyama => umeyama_alignment(
            &pairs.iter().map(|&(i, j)| (est[i].1.position, gt[j].1.position)).collect::<Vec<_>>(),
        ),
    };
    let mut sq_trans = 0.0;
    let mut sq_rot = 0.0;
    for &(i, j) in &pairs {
        let aligned = transform.apply(&est[i].1);
        sq_trans += (aligned.position - gt[j].1.position).norm_squared();
        let angle = aligned.rotation.angle_to(&gt[j].1.rotation);
        sq_rot += angle * angle;
    }
    let n = pairs.len() as f64;
    Ok(((sq_trans / n).sqrt(), (sq_rot / n).sqrt().to_degrees()))
}

/// Mean normalized estimation error squared over 6-dof pose errors.
pub fn compute_nees(samples: &[(SVector<f64, 6>, SMatrix<f64, 6, 6>)]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (idx, (e, p)) in samples.iter().enumerate() {
        let chol = p.cholesky().ok_or(MetricsError::SingularCovariance(idx))?;
        sum += e.dot(&chol.solve(e));
    }
    Ok(sum / samples.len() as f64)
}

/// One-sided Wilcoxon signed-rank test of `x < y` (paired). Returns the
/// p-value; exact when the absolute differences carry no ties, otherwise the
/// tie-corrected normal approximation.
pub fn wilcoxon_signed_rank_less(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    let mut diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    // Average ranks over tied magnitudes.
    let mut ranks = vec![0.0; n];
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        if j > i {
            has_ties = true;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        i = j + 1;
    }
    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();

    if !has_ties && n <= 50 {
        // Exact tail: count rank subsets with sum <= w_plus.
        let max_sum = n * (n + 1) / 2;
        let w = w_plus.round() as usize;
        let mut counts = vec![0u128; max_sum + 1];
        counts[0] = 1;
        for rank in 1..=n {
            for s in (rank..=max_sum).rev() {
                counts[s] += counts[s - rank];
            }
        }
        let favorable: u128 = counts.iter().take(w.min(max_sum) + 1).sum();
        return favorable as f64 / 2f64.powi(n as i32);
    }
    // Normal approximation with tie correction and continuity correction.
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus + 0.5 - mean) / var.sqrt();
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

/// Per-seed experiment outcome. The wall-clock figure is excluded from the
/// canonical serialized form so metrics files stay bit-identical across
/// re-runs; timing is written to a separate sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub seed: u64,
    pub ate_rmse_m: f64,
    pub are_rmse_deg: f64,
    pub mean_nees: f64,
    pub point_utilization: f64,
    pub line_utilization: f64,
    pub frames: usize,
    pub diverged: bool,
    #[serde(skip)]
    pub wall_clock_per_frame_ms: f64,
}

/// Render records as a CSV table.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "variant,seed,ate_rmse_m,are_rmse_deg,mean_nees,point_utilization,line_utilization,frames,diverged\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.6},{:.6},{:.6},{},{}\n",
            r.variant,
            r.seed,
            r.ate_rmse_m,
            r.are_rmse_deg,
            r.mean_nees,
            r.point_utilization,
            r.line_utilization,
            r.frames,
            r.diverged
        ));
    }
    out
}

/// Checked sample covariance helper for Monte-Carlo oracles in tests.
pub fn sample_covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let d = samples.first().map(|s| s.len()).unwrap_or(0);
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        for r in 0..d {
            for c in 0..d {
                cov[(r, c)] += (s[r] - mean[r]) * (s[c] - mean[c]);
            }
        }
    }
    cov / (n as f64 - 1.0)
}
