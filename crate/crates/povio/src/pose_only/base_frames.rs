//! Unified base-frame selection for point and line tracks.
//!
//! The first and last observed frames are fixed as base frames `i` and `k`.
//! Candidate intermediate frames are gated by the coefficient of variation of
//! the per-pair depth (points) or distance (lines) estimates, then the frame
//! maximizing the combined parallax (points) or combined parallax angle
//! (lines) over the three pairs is chosen as `j`.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{skew, Pose};
use crate::pose_only::line::{line_pair_geometry, LineTrack};
use crate::pose_only::point::{depth_from_pair, PointTrack};

/// Default coefficient-of-variation threshold for the stability gate.
pub const DEFAULT_COV_THRESHOLD: f64 = 0.25;

/// Default parallax floor below which a candidate point pair is degenerate.
pub const DEFAULT_MIN_PARALLAX: f64 = 0.02;

/// Default parallax-angle floor (radians) for candidate line pairs.
pub const DEFAULT_MIN_PARALLAX_ANGLE: f64 = 0.025;

/// The three frames backing a pose-only measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseFrameTriple {
    /// First observed frame.
    pub i: u64,
    /// Selected intermediate frame.
    pub j: u64,
    /// Current frame.
    pub k: u64,
}

/// Why a track produced no base frames.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Rejection {
    #[error("track too short ({0} observations, need 3)")]
    TooShort(usize),
    #[error("unstable feature: coefficient of variation {0:.3} over threshold")]
    UnstableFeature(f64),
    #[error("all candidate pairs degenerate")]
    AllDegenerate,
}

/// Parallax between two views of a point: cross-product magnitude of the
/// rotated normalized observations.
pub fn parallax(
    pose_i: &Pose,
    pose_j: &Pose,
    f_i: &Vector3<f64>,
    f_j: &Vector3<f64>,
) -> f64 {
    let r_rel = pose_j.rotation.matrix() * pose_i.rotation.matrix().transpose();
    (skew(f_j) * (r_rel * f_i)).norm()
}

/// Angle between the projection planes of two line views.
pub fn parallax_angle(
    pose_i: &Pose,
    pose_j: &Pose,
    n_i: &Vector3<f64>,
    n_j: &Vector3<f64>,
) -> f64 {
    let r_rel = pose_i.rotation.matrix() * pose_j.rotation.matrix().transpose();
    (skew(&(r_rel * n_j)) * n_i).norm().clamp(0.0, 1.0).asin()
}

/// Population coefficient of variation of a sample set.
pub(crate) fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean.abs() < 1e-12 {
        return f64::INFINITY;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

struct Candidate {
    frame_id: u64,
    combined: f64,
}

fn select_common(
    frame_ids: &[u64],
    mut pair_value: impl FnMut(u64) -> Option<f64>,
    mut pair_weight: impl FnMut(u64, u64) -> f64,
    c_th: f64,
) -> Result<BaseFrameTriple, Rejection> {
    let n = frame_ids.len();
    if n < 3 {
        return Err(Rejection::TooShort(n));
    }
    let (first, last) = (frame_ids[0], frame_ids[n - 1]);

    let mut depths = Vec::new();
    let mut usable = Vec::new();
    for &j in &frame_ids[1..n - 1] {
        if let Some(value) = pair_value(j) {
            depths.push(value);
            usable.push(j);
        }
    }
    if usable.is_empty() {
        return Err(Rejection::AllDegenerate);
    }
    let c = coefficient_of_variation(&depths);
    if c > c_th {
        return Err(Rejection::UnstableFeature(c));
    }

    let mut best: Option<Candidate> = None;
    for &j in &usable {
        let combined = pair_weight(first, j) * pair_weight(last, first) * pair_weight(j, last);
        match &best {
            Some(b) if combined <= b.combined => {}
            _ => best = Some(Candidate { frame_id: j, combined }),
        }
    }
    let best = best.ok_or(Rejection::AllDegenerate)?;
    Ok(BaseFrameTriple { i: first, j: best.frame_id, k: last })
}

/// Base frames for a point track. `poses` maps frame id to camera pose; every
/// track frame must be present. Candidate pairs whose parallax falls below
/// `min_parallax` are excluded as degenerate (the depth they constrain is
/// unobservable there).
pub fn select_point_base_frames(
    track: &PointTrack,
    poses: &BTreeMap<u64, Pose>,
    c_th: f64,
    min_parallax: f64,
) -> Result<BaseFrameTriple, Rejection> {
    let obs = track.observations();
    let frame_ids: Vec<u64> = obs.iter().map(|o| o.frame_id).collect();
    let lookup = |id: u64| -> (&Pose, &Vector3<f64>) {
        let o = track.get(id).expect("frame id from the track");
        (&poses[&id], &o.normalized)
    };
    select_common(
        &frame_ids,
        |j| {
            let (pose_i, f_i) = lookup(frame_ids[0]);
            let (pose_j, f_j) = lookup(j);
            if parallax(pose_i, pose_j, f_i, f_j) < min_parallax {
                return None;
            }
            depth_from_pair(pose_i, pose_j, f_i, f_j).ok()
        },
        |a, b| {
            let (pose_a, f_a) = lookup(a);
            let (pose_b, f_b) = lookup(b);
            parallax(pose_a, pose_b, f_a, f_b)
        },
        c_th,
    )
}

/// Base frames for a line track, gated on the per-pair distance estimates and
/// ranked by combined parallax angle. Candidate pairs with projection-plane
/// angles under `min_parallax_angle` (radians) are excluded as degenerate.
pub fn select_line_base_frames(
    track: &LineTrack,
    poses: &BTreeMap<u64, Pose>,
    c_th: f64,
    min_parallax_angle: f64,
) -> Result<BaseFrameTriple, Rejection> {
    let obs = track.observations();
    let frame_ids: Vec<u64> = obs.iter().map(|o| o.frame_id).collect();
    select_common(
        &frame_ids,
        |j| {
            let obs_i = track.get(frame_ids[0]).unwrap();
            let obs_j = track.get(j).unwrap();
            if parallax_angle(&poses[&frame_ids[0]], &poses[&j], &obs_i.normal, &obs_j.normal)
                < min_parallax_angle
            {
                return None;
            }
            match line_pair_geometry(&poses[&frame_ids[0]], &poses[&j], obs_i, obs_j) {
                Ok(pair) if !pair.distance_degenerate => Some(pair.d_l),
                _ => None,
            }
        },
        |a, b| {
            let obs_a = track.get(a).unwrap();
            let obs_b = track.get(b).unwrap();
            parallax_angle(&poses[&a], &poses[&b], &obs_a.normal, &obs_b.normal)
        },
        c_th,
    )
}
