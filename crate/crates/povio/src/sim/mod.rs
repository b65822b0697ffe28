//! Synthetic world and sensor generator: ground-truth trajectory, landmark
//! points and 3D line segments, exact projections plus configurable noise,
//! and fabricated bidirectional-flow reports.

pub mod trajectory;

use nalgebra::{Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::culling::{AnchorFlow, AnchorFlowReport};
use crate::geometry::{CameraIntrinsics, Extrinsics, Pose, Rotation};
use crate::propagation::{ImuSample, NoiseConfig};
use trajectory::TrajectorySpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
}

/// Complete synthetic world description.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub trajectory: TrajectorySpec,
    pub duration_s: f64,
    pub camera_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub points: Vec<Vector3<f64>>,
    pub lines: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub cam: CameraIntrinsics,
    pub ext: Extrinsics,
    pub image_width: f64,
    pub image_height: f64,
    pub noise: NoiseConfig,
    /// Isotropic pixel noise on point observations.
    pub pixel_noise_point: f64,
    /// Isotropic pixel noise on line endpoints.
    pub pixel_noise_line: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub min_line_length_px: f64,
    pub anchors_per_line: usize,
    /// Front-end tracking capacity: at most this many point features are
    /// reported per frame, preferring features already being tracked.
    pub max_tracked_points: usize,
    /// Mean tracked lifetime of a point feature, frames. Tracking losses are
    /// simulated by retiring the feature id and reissuing observations of the
    /// same landmark under a fresh id after a short cooldown.
    pub mean_point_track_frames: f64,
    /// Mean tracked lifetime of a line feature, frames.
    pub mean_line_track_frames: f64,
    /// Reject worlds where some landmark is visible in fewer than 3 frames.
    /// Disable for deliberately partial diagnostic worlds.
    pub enforce_visibility: bool,
    pub seed: u64,
}

/// Feature ids carry a track-generation index; this recovers the landmark.
pub fn landmark_index(feature_id: u64) -> usize {
    (feature_id % TRACK_ID_STRIDE) as usize
}

/// Id namespace stride between successive tracks of the same landmark.
pub const TRACK_ID_STRIDE: u64 = 1_000_000;

impl SimWorld {
    /// 10x10x4 m room with landmarks on the walls and a 3 m circle
    /// trajectory; sized so Monte-Carlo suites run in minutes.
    pub fn default_room(seed: u64) -> Self {
        Self::room(seed, 1000, 60)
    }

    /// Wall-landmark room with explicit landmark counts.
    pub fn room(seed: u64, n_points: usize, n_lines: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            points.push(random_wall_point(&mut rng));
        }
        let mut lines = Vec::with_capacity(n_lines);
        for i in 0..n_lines {
            lines.push(random_wall_line(&mut rng, i % 2 == 0));
        }
        SimWorld {
            trajectory: TrajectorySpec::Circle { radius_m: 3.0, period_s: 24.0, height_m: 1.5 },
            duration_s: 60.0,
            camera_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            points,
            lines,
            cam: CameraIntrinsics::pinhole(460.0, 460.0, 320.0, 240.0),
            ext: default_extrinsics(),
            image_width: 640.0,
            image_height: 480.0,
            noise: NoiseConfig::default(),
            pixel_noise_point: 1.0,
            pixel_noise_line: 1.5,
            gyro_bias: Vector3::new(0.002, -0.0015, 0.001),
            accel_bias: Vector3::new(0.02, 0.01, -0.015),
            min_line_length_px: 20.0,
            anchors_per_line: 10,
            max_tracked_points: 60,
            mean_point_track_frames: 8.0,
            mean_line_track_frames: 8.0,
            enforce_visibility: true,
            seed,
        }
    }
}

/// Camera looking along body -y (sideways), image y down. On the default
/// circle (body x along the velocity) this faces the nearby wall with the
/// baseline perpendicular to the optical axis, the parallax-richest mounting.
pub fn default_extrinsics() -> Extrinsics {
    let r_ic = nalgebra::Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0);
    Extrinsics {
        rotation_imu_to_camera: Rotation::from_matrix(&r_ic),
        imu_position_in_camera: Vector3::new(0.05, -0.02, 0.03),
    }
}

fn random_wall_point(rng: &mut ChaCha20Rng) -> Vector3<f64> {
    let wall = rng.random_range(0..4);
    let along = rng.random_range(-5.0..5.0);
    let height = rng.random_range(0.5..2.5);
    match wall {
        0 => Vector3::new(5.0, along, height),
        1 => Vector3::new(-5.0, along, height),
        2 => Vector3::new(along, 5.0, height),
        _ => Vector3::new(along, -5.0, height),
    }
}

fn random_wall_line(rng: &mut ChaCha20Rng, vertical: bool) -> (Vector3<f64>, Vector3<f64>) {
    let anchor = random_wall_point(rng);
    let length = rng.random_range(1.0..3.0);
    if vertical {
        let length = f64::min(length, 1.8);
        let z0 = anchor.z.min(2.4 - length).max(0.5);
        (
            Vector3::new(anchor.x, anchor.y, z0),
            Vector3::new(anchor.x, anchor.y, z0 + length),
        )
    } else {
        // Horizontal, along the wall direction.
        let dir = if anchor.x.abs() > 4.9 {
            Vector3::new(0.0, 1.0, 0.0)
        } else {
            Vector3::new(1.0, 0.0, 0.0)
        };
        let start = anchor - dir * (length / 2.0);
        let end = anchor + dir * (length / 2.0);
        (clamp_to_wall(start), clamp_to_wall(end))
    }
}

fn clamp_to_wall(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(p.x.clamp(-5.0, 5.0), p.y.clamp(-5.0, 5.0), p.z.clamp(0.5, 2.5))
}

/// One observed point feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureObs {
    pub id: u64,
    pub pixel: Vector2<f64>,
    /// Undistorted normalized coordinates of `pixel`.
    pub normalized: Vector3<f64>,
}

/// One observed line feature (endpoints re-derived per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct LineFeatureObs {
    pub id: u64,
    pub start_pixel: Vector2<f64>,
    pub end_pixel: Vector2<f64>,
}

/// Everything the front-end would hand the filter for one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub true_imu_pose: Pose,
    pub points: Vec<PointFeatureObs>,
    pub lines: Vec<LineFeatureObs>,
    pub flow_reports: Vec<AnchorFlowReport>,
    /// Labels from outlier injection, for culling-efficacy oracles.
    pub corrupted_lines: Vec<u64>,
    pub corrupted_points: Vec<u64>,
}

/// Generated dataset: camera frames, IMU stream and ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub frames: Vec<SimFrame>,
    pub imu: Vec<ImuSample>,
    /// IMU pose at each camera timestamp.
    pub ground_truth: Vec<(f64, Pose)>,
}

struct NoiseSampler {
    rng: ChaCha20Rng,
}

/// Per-landmark tracking-survival process: geometric lifetimes with a short
/// blackout between tracks, reissuing fresh feature ids.
struct TrackLife {
    run_index: u64,
    cooldown: u8,
    rng: ChaCha20Rng,
    drop_probability: f64,
}

impl TrackLife {
    fn new(seed: u64, landmark: usize, mean_frames: f64) -> Self {
        TrackLife {
            run_index: 0,
            cooldown: 0,
            rng: ChaCha20Rng::seed_from_u64(
                seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (landmark as u64),
            ),
            drop_probability: if mean_frames.is_finite() && mean_frames >= 1.0 {
                1.0 / mean_frames
            } else {
                0.0
            },
        }
    }

    /// Advance one frame while the landmark is geometrically visible.
    /// Returns the feature id to emit, or None during a blackout.
    fn step(&mut self, landmark: usize) -> Option<u64> {
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return None;
        }
        if self.drop_probability > 0.0 && self.rng.random_range(0.0..1.0) < self.drop_probability
        {
            self.cooldown = 2;
            self.run_index += 1;
            return None;
        }
        Some(landmark as u64 + TRACK_ID_STRIDE * self.run_index)
    }
}

impl NoiseSampler {
    fn new(seed: u64) -> Self {
        NoiseSampler { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    fn gaussian3(&mut self, sigma: f64) -> Vector3<f64> {
        if sigma == 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, sigma).unwrap();
        Vector3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng))
    }

    fn gaussian2(&mut self, sigma: f64) -> Vector2<f64> {
        if sigma == 0.0 {
            return Vector2::zeros();
        }
        let n = Normal::new(0.0, sigma).unwrap();
        Vector2::new(n.sample(&mut self.rng), n.sample(&mut self.rng))
    }
}

fn in_image(world: &SimWorld, px: &Vector2<f64>) -> bool {
    px.x >= 0.0 && px.x < world.image_width && px.y >= 0.0 && px.y < world.image_height
}

const MIN_DEPTH: f64 = 0.2;
const LINE_SUBDIVISIONS: usize = 100;

/// Longest contiguous visible run of the segment, as parameter bounds.
fn visible_span(world: &SimWorld, cam_pose: &Pose, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    for i in 0..=LINE_SUBDIVISIONS {
        let s = i as f64 / LINE_SUBDIVISIONS as f64;
        let p = a + (b - a) * s;
        let pc = cam_pose.transform_to_frame(&p);
        let visible = pc.z > MIN_DEPTH && {
            let f = Vector3::new(pc.x / pc.z, pc.y / pc.z, 1.0);
            in_image(world, &world.cam.project_and_distort(&f))
        };
        match (visible, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                let len = i - start;
                if best.map(|(s0, e0)| len > e0 - s0).unwrap_or(true) {
                    best = Some((start, i - 1));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(start) = run_start {
        let len = LINE_SUBDIVISIONS + 1 - start;
        if best.map(|(s0, e0)| len > e0 - s0 + 1).unwrap_or(true) {
            best = Some((start, LINE_SUBDIVISIONS));
        }
    }
    best.map(|(s, e)| {
        (s as f64 / LINE_SUBDIVISIONS as f64, e as f64 / LINE_SUBDIVISIONS as f64)
    })
}

/// Generate the full dataset for `world`. Deterministic in `world.seed`.
pub fn generate(world: &SimWorld) -> Result<SimData, SimError> {
    if world.camera_rate_hz <= 0.0 || world.imu_rate_hz <= 0.0 {
        return Err(SimError::InvalidSpec("rates must be positive".into()));
    }
    if world.imu_rate_hz < world.camera_rate_hz {
        return Err(SimError::InvalidSpec("imu rate must be >= camera rate".into()));
    }
    if !world.noise.validate() {
        return Err(SimError::InvalidSpec("noise densities must be non-negative".into()));
    }
    if world.duration_s <= 0.0 {
        return Err(SimError::InvalidSpec("duration must be positive".into()));
    }

    let mut imu_noise = NoiseSampler::new(world.seed.wrapping_mul(0xa076_1d64_78bd_642f));
    let mut pixel_noise = NoiseSampler::new(world.seed.wrapping_mul(0xe703_7ed1_a0b4_28db) ^ 1);
    let gravity = world.noise.gravity_vector();

    // IMU stream: invert the measurement models from analytic derivatives.
    let imu_dt = 1.0 / world.imu_rate_hz;
    let n_imu = (world.duration_s * world.imu_rate_hz).round() as usize;
    let sqrt_rate = world.imu_rate_hz.sqrt();
    let mut imu = Vec::with_capacity(n_imu + 1);
    for i in 0..=n_imu {
        let t = i as f64 * imu_dt;
        let s = world.trajectory.sample(t);
        let omega = s.body_rate
            + world.gyro_bias
            + imu_noise.gaussian3(world.noise.gyro_noise_density * sqrt_rate);
        let accel = s.pose.rotation.rotate(&(s.acceleration + gravity))
            + world.accel_bias
            + imu_noise.gaussian3(world.noise.accel_noise_density * sqrt_rate);
        imu.push(ImuSample { timestamp: t, angular_velocity: omega, linear_acceleration: accel });
    }

    // Camera frames.
    let cam_dt = 1.0 / world.camera_rate_hz;
    let n_frames = (world.duration_s * world.camera_rate_hz).floor() as usize;
    let mut frames: Vec<SimFrame> = Vec::with_capacity(n_frames + 1);
    let mut ground_truth = Vec::with_capacity(n_frames + 1);
    let mut visibility_count = vec![0usize; world.points.len()];
    let mut point_lives: Vec<TrackLife> = (0..world.points.len())
        .map(|i| TrackLife::new(world.seed, i, world.mean_point_track_frames))
        .collect();
    let mut line_lives: Vec<TrackLife> = (0..world.lines.len())
        .map(|i| TrackLife::new(world.seed ^ 0x517c_c1b7_2722_0a95, i, world.mean_line_track_frames))
        .collect();
    // Per-line endpoint parameters of the previous frame, for flow anchors.
    let mut prev_line_spans: Vec<Option<(f64, f64)>> = vec![None; world.lines.len()];
    let mut prev_line_ids: Vec<Option<u64>> = vec![None; world.lines.len()];
    let mut prev_point_ids: std::collections::BTreeSet<u64> = std::collections::BTreeSet::new();

    for frame_id in 0..=n_frames as u64 {
        let t = frame_id as f64 * cam_dt;
        let s = world.trajectory.sample(t);
        let cam_pose = world.ext.camera_pose_from_imu(&s.pose);
        ground_truth.push((t, s.pose));

        // Geometrically visible candidates, then the front-end capacity cut:
        // features tracked in the previous frame continue, new detections fill
        // remaining slots in id order.
        let mut candidates = Vec::new();
        for (idx, landmark) in world.points.iter().enumerate() {
            let pc = cam_pose.transform_to_frame(landmark);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let f = Vector3::new(pc.x / pc.z, pc.y / pc.z, 1.0);
            let exact = world.cam.project_and_distort(&f);
            if !in_image(world, &exact) {
                continue;
            }
            visibility_count[idx] += 1;
            let Some(feature_id) = point_lives[idx].step(idx) else { continue };
            candidates.push((idx, feature_id, exact));
        }
        candidates.sort_by_key(|(_, id, _)| {
            (if prev_point_ids.contains(id) { 0u8 } else { 1u8 }, *id)
        });
        candidates.truncate(world.max_tracked_points);
        candidates.sort_by_key(|(_, id, _)| *id);
        let mut points = Vec::new();
        prev_point_ids.clear();
        for (_, feature_id, exact) in candidates {
            let pixel = exact + pixel_noise.gaussian2(world.pixel_noise_point);
            let Ok(normalized) = world.cam.undistort_to_normalized(&pixel) else { continue };
            prev_point_ids.insert(feature_id);
            points.push(PointFeatureObs { id: feature_id, pixel, normalized });
        }

        let mut lines = Vec::new();
        let mut flow_reports = Vec::new();
        let mut new_spans: Vec<Option<(f64, f64)>> = vec![None; world.lines.len()];
        let mut new_ids: Vec<Option<u64>> = vec![None; world.lines.len()];
        for (idx, (a, b)) in world.lines.iter().enumerate() {
            let Some((lo, hi)) = visible_span(world, &cam_pose, a, b) else { continue };
            if hi - lo < 0.05 {
                continue;
            }
            let Some(feature_id) = line_lives[idx].step(idx) else { continue };
            // Endpoints re-sampled inside the visible span each frame.
            let margin = 0.15 * (hi - lo);
            let sa = lo + pixel_noise.rng.random_range(0.0..margin);
            let sb = hi - pixel_noise.rng.random_range(0.0..margin);
            let pa = a + (b - a) * sa;
            let pb = a + (b - a) * sb;
            let fa = cam_pose.transform_to_frame(&pa);
            let fb = cam_pose.transform_to_frame(&pb);
            let na = Vector3::new(fa.x / fa.z, fa.y / fa.z, 1.0);
            let nb = Vector3::new(fb.x / fb.z, fb.y / fb.z, 1.0);
            let exact_a = world.cam.project_and_distort(&na);
            let exact_b = world.cam.project_and_distort(&nb);
            if (exact_b - exact_a).norm() < world.min_line_length_px {
                continue;
            }
            let start_pixel = exact_a + pixel_noise.gaussian2(world.pixel_noise_line);
            let end_pixel = exact_b + pixel_noise.gaussian2(world.pixel_noise_line);
            lines.push(LineFeatureObs { id: feature_id, start_pixel, end_pixel });
            new_spans[idx] = Some((sa, sb));
            new_ids[idx] = Some(feature_id);

            // Fabricated bidirectional-flow report for lines tracked from the
            // previous frame under the same id.
            if prev_line_ids[idx] != Some(feature_id) {
                prev_line_spans[idx] = None;
            }
            if let (Some((pa0, pb0)), Some(prev)) =
                (prev_line_spans[idx], frames.last().map(|f: &SimFrame| &f.true_imu_pose))
            {
                let prev_cam = world.ext.camera_pose_from_imu(prev);
                let mut anchors = Vec::with_capacity(world.anchors_per_line);
                for k in 0..world.anchors_per_line {
                    let u = pa0 + (pb0 - pa0) * (k as f64 / (world.anchors_per_line - 1) as f64);
                    let pw = a + (b - a) * u;
                    let prev_c = prev_cam.transform_to_frame(&pw);
                    let cur_c = cam_pose.transform_to_frame(&pw);
                    if prev_c.z <= MIN_DEPTH || cur_c.z <= MIN_DEPTH {
                        continue;
                    }
                    let prev_px = world.cam.project_and_distort(&Vector3::new(
                        prev_c.x / prev_c.z,
                        prev_c.y / prev_c.z,
                        1.0,
                    ));
                    let cur_px = world.cam.project_and_distort(&Vector3::new(
                        cur_c.x / cur_c.z,
                        cur_c.y / cur_c.z,
                        1.0,
                    ));
                    anchors.push(AnchorFlow {
                        position: prev_px,
                        forward: cur_px,
                        backward: prev_px + pixel_noise.gaussian2(0.05),
                    });
                }
                if anchors.len() >= 2 {
                    flow_reports.push(AnchorFlowReport { line_id: feature_id, anchors });
                }
            }
        }
        prev_line_spans = new_spans;
        prev_line_ids = new_ids;

        frames.push(SimFrame {
            frame_id,
            timestamp: t,
            true_imu_pose: s.pose,
            points,
            lines,
            flow_reports,
            corrupted_lines: Vec::new(),
            corrupted_points: Vec::new(),
        });
    }

    let insufficient = visibility_count.iter().filter(|&&c| c < 3).count();
    if world.enforce_visibility && insufficient > 0 {
        return Err(SimError::InvalidSpec(format!(
            "{insufficient} landmarks visible in fewer than 3 frames"
        )));
    }
    Ok(SimData { frames, imu, ground_truth })
}

/// Perturb a fraction of the observations and make the matching flow reports
/// inconsistent. Corrupted ids are recorded per frame for oracle tests.
///
/// `magnitude_px` is the upper bound of the per-observation displacement,
/// drawn uniformly from `[0.12 * magnitude_px, magnitude_px]` so the injected
/// set mixes gross and subtle mismatches.
pub fn inject_outliers(
    frames: &mut [SimFrame],
    fraction: f64,
    magnitude_px: f64,
    seed: u64,
) {
    assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0, 1]");
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut draw_magnitude =
        |rng: &mut ChaCha20Rng| rng.random_range(0.12 * magnitude_px..=magnitude_px);
    for frame in frames {
        let mut corrupted_lines = Vec::new();
        for line in &mut frame.lines {
            if rng.random_range(0.0..1.0) < fraction {
                let m = draw_magnitude(&mut rng);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                line.start_pixel += Vector2::new(dir.cos(), dir.sin()) * m;
                let dir2 = rng.random_range(0.0..std::f64::consts::TAU);
                line.end_pixel += Vector2::new(dir2.cos(), dir2.sin()) * m;
                corrupted_lines.push(line.id);
            }
        }
        for report in &mut frame.flow_reports {
            if corrupted_lines.contains(&report.line_id) {
                let m = draw_magnitude(&mut rng);
                for anchor in &mut report.anchors {
                    let dir = rng.random_range(0.0..std::f64::consts::TAU);
                    anchor.backward += Vector2::new(dir.cos(), dir.sin()) * m;
                }
            }
        }
        let mut corrupted_points = Vec::new();
        for point in &mut frame.points {
            if rng.random_range(0.0..1.0) < fraction {
                let m = draw_magnitude(&mut rng);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                point.pixel += Vector2::new(dir.cos(), dir.sin()) * m;
                corrupted_points.push(point.id);
            }
        }
        frame.corrupted_lines = corrupted_lines;
        frame.corrupted_points = corrupted_points;
    }
}

/// Export the IMU stream as CSV (`t, wx, wy, wz, ax, ay, az`).
pub fn export_imu_csv<W: std::io::Write>(imu: &[ImuSample], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,wx,wy,wz,ax,ay,az")?;
    for s in imu {
        writeln!(
            w,
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.timestamp,
            s.angular_velocity.x,
            s.angular_velocity.y,
            s.angular_velocity.z,
            s.linear_acceleration.x,
            s.linear_acceleration.y,
            s.linear_acceleration.z
        )?;
    }
    Ok(())
}

/// Export frame observations as CSV
/// (`frame_id, t, kind, feature_id, x0, y0, x1, y1`; points leave x1/y1 empty).
pub fn export_frames_csv<W: std::io::Write>(frames: &[SimFrame], mut w: W) -> std::io::Result<()> {
    writeln!(w, "frame_id,t,kind,feature_id,x0,y0,x1,y1")?;
    for f in frames {
        for p in &f.points {
            writeln!(
                w,
                "{},{:.9},point,{},{:.6},{:.6},,",
                f.frame_id, f.timestamp, p.id, p.pixel.x, p.pixel.y
            )?;
        }
        for l in &f.lines {
            writeln!(
                w,
                "{},{:.9},line,{},{:.6},{:.6},{:.6},{:.6}",
                f.frame_id,
                f.timestamp,
                l.id,
                l.start_pixel.x,
                l.start_pixel.y,
                l.end_pixel.x,
                l.end_pixel.y
            )?;
        }
    }
    Ok(())
}
