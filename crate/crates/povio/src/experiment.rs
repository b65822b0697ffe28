//! Batch experiment runner: configures worlds and filter variants, runs
//! seeded Monte-Carlo trials in parallel, and writes trajectories, per-frame
//! reports and metrics under `out/<variant>/<seed>/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{FilterConfig, FilterError, InitialStd, VioFilter};
use crate::geometry::Pose;
use crate::metrics::{
    compute_ate_are, compute_nees, write_tum, Alignment, MetricsError, MetricsRecord, TrajPoint,
};
use crate::pose_only::base_frames::select_line_base_frames;
use crate::pose_only::line::{LineObservation, LineTrack};
use crate::propagation::NoiseConfig;
use crate::sim::trajectory::TrajectorySpec;
use crate::sim::{generate, inject_outliers, SimError, SimFrame, SimWorld};
use crate::state::ImuState;
use crate::updater::delayed::delayed_line_fusable;
use crate::updater::UpdaterConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Filter variants mirroring the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Immediate pose-only points and lines, with line culling.
    Popl,
    /// Immediate pose-only points only.
    PointsOnlyPo,
    /// Points and lines without the line culling stage.
    PoplNoCull,
    /// Delayed triangulation + null-space point baseline, no lines.
    DelayedBaseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Popl => "popl",
            Variant::PointsOnlyPo => "points-only-po",
            Variant::PoplNoCull => "popl-no-cull",
            Variant::DelayedBaseline => "delayed-baseline",
        }
    }

    /// Impose the variant's pipeline switches on a filter configuration.
    pub fn apply(&self, cfg: &mut FilterConfig) {
        match self {
            Variant::Popl => {
                cfg.use_points = true;
                cfg.use_lines = true;
                cfg.cull_lines = true;
                cfg.delayed_points = false;
            }
            Variant::PointsOnlyPo => {
                cfg.use_points = true;
                cfg.use_lines = false;
                cfg.delayed_points = false;
            }
            Variant::PoplNoCull => {
                cfg.use_points = true;
                cfg.use_lines = true;
                cfg.cull_lines = false;
                cfg.delayed_points = false;
            }
            Variant::DelayedBaseline => {
                cfg.use_points = true;
                cfg.use_lines = false;
                cfg.delayed_points = true;
            }
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popl" => Ok(Variant::Popl),
            "points-only-po" => Ok(Variant::PointsOnlyPo),
            "popl-no-cull" => Ok(Variant::PoplNoCull),
            "delayed-baseline" => Ok(Variant::DelayedBaseline),
            other => Err(format!(
                "unknown variant {other:?}; expected popl | points-only-po | popl-no-cull | delayed-baseline"
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trajectory description in the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TrajectoryConfig {
    Circle { radius_m: f64, period_s: f64, height_m: f64 },
    Sinusoid3d {
        amplitude_m: [f64; 3],
        frequency_hz: [f64; 3],
        center: [f64; 3],
        yaw_rate_rad_s: f64,
    },
    Waypoints { points: Vec<[f64; 3]>, duration_s: f64, yaw_rate_rad_s: f64 },
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::Circle { radius_m: 3.0, period_s: 24.0, height_m: 1.5 }
    }
}

impl From<&TrajectoryConfig> for TrajectorySpec {
    fn from(cfg: &TrajectoryConfig) -> Self {
        match cfg {
            TrajectoryConfig::Circle { radius_m, period_s, height_m } => TrajectorySpec::Circle {
                radius_m: *radius_m,
                period_s: *period_s,
                height_m: *height_m,
            },
            TrajectoryConfig::Sinusoid3d { amplitude_m, frequency_hz, center, yaw_rate_rad_s } => {
                TrajectorySpec::Sinusoid3d {
                    amplitude_m: *amplitude_m,
                    frequency_hz: *frequency_hz,
                    center: *center,
                    yaw_rate_rad_s: *yaw_rate_rad_s,
                }
            }
            TrajectoryConfig::Waypoints { points, duration_s, yaw_rate_rad_s } => {
                TrajectorySpec::Waypoints {
                    points: points.clone(),
                    duration_s: *duration_s,
                    yaw_rate_rad_s: *yaw_rate_rad_s,
                }
            }
        }
    }
}

fn default_duration() -> f64 {
    60.0
}
fn default_camera_rate() -> f64 {
    20.0
}
fn default_imu_rate() -> f64 {
    200.0
}
fn default_n_points() -> usize {
    1000
}
fn default_n_lines() -> usize {
    60
}
fn default_pixel_noise_point() -> f64 {
    1.0
}
fn default_pixel_noise_line() -> f64 {
    1.5
}
fn default_true() -> bool {
    true
}
fn default_point_track_frames() -> f64 {
    8.0
}
fn default_line_track_frames() -> f64 {
    8.0
}
fn default_max_tracked_points() -> usize {
    60
}
fn default_outlier_fraction() -> f64 {
    0.05
}

/// Synthetic-world description in the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_camera_rate")]
    pub camera_rate_hz: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate_hz: f64,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default = "default_n_lines")]
    pub n_lines: usize,
    #[serde(default = "default_pixel_noise_point")]
    pub pixel_noise_point: f64,
    #[serde(default = "default_pixel_noise_line")]
    pub pixel_noise_line: f64,
    #[serde(default)]
    pub imu_noise: NoiseConfig,
    #[serde(default = "default_max_tracked_points")]
    pub max_tracked_points: usize,
    #[serde(default = "default_point_track_frames")]
    pub mean_point_track_frames: f64,
    #[serde(default = "default_line_track_frames")]
    pub mean_line_track_frames: f64,
    #[serde(default = "default_true")]
    pub enforce_visibility: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl WorldConfig {
    pub fn build(&self, seed: u64) -> SimWorld {
        let mut world = SimWorld::room(seed, self.n_points, self.n_lines);
        world.trajectory = (&self.trajectory).into();
        world.duration_s = self.duration_s;
        world.camera_rate_hz = self.camera_rate_hz;
        world.imu_rate_hz = self.imu_rate_hz;
        world.pixel_noise_point = self.pixel_noise_point;
        world.pixel_noise_line = self.pixel_noise_line;
        world.noise = self.imu_noise;
        world.max_tracked_points = self.max_tracked_points;
        world.mean_point_track_frames = self.mean_point_track_frames;
        world.mean_line_track_frames = self.mean_line_track_frames;
        world.enforce_visibility = self.enforce_visibility;
        world
    }
}

/// Filter tuning in the config file (variant switches are applied on top).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterTuning {
    pub window_size: usize,
    pub cov_threshold: f64,
    pub min_track_len: usize,
    pub point_noise_std_px: f64,
    pub line_noise_std_px: f64,
    pub noise_inflation: f64,
    pub chi2_gate: bool,
    pub chi2_confidence: f64,
    pub max_point_blocks: usize,
    pub max_line_blocks: usize,
    pub min_pair_parallax: f64,
    pub min_pair_parallax_angle: f64,
    pub flow_pixel_tol: f64,
    pub flow_majority_fraction: f64,
    pub min_line_obs_px: f64,
    pub grid: crate::culling::GridConfig,
    pub initial_std: InitialStd,
}

impl Default for FilterTuning {
    fn default() -> Self {
        let u = UpdaterConfig::default();
        let f = FilterConfig::default();
        FilterTuning {
            window_size: f.window_size,
            cov_threshold: u.cov_threshold,
            min_track_len: u.min_track_len,
            point_noise_std_px: u.point_noise_std_px,
            line_noise_std_px: u.line_noise_std_px,
            noise_inflation: u.noise_inflation,
            chi2_gate: u.chi2_gate,
            chi2_confidence: u.chi2_confidence,
            max_point_blocks: u.max_point_blocks,
            max_line_blocks: u.max_line_blocks,
            min_pair_parallax: u.min_pair_parallax,
            min_pair_parallax_angle: u.min_pair_parallax_angle,
            flow_pixel_tol: f.flow_pixel_tol,
            flow_majority_fraction: f.flow_majority_fraction,
            min_line_obs_px: f.min_line_obs_px,
            grid: f.grid,
            initial_std: f.initial_std,
        }
    }
}

impl FilterTuning {
    pub fn to_filter_config(&self, imu_noise: NoiseConfig) -> FilterConfig {
        FilterConfig {
            window_size: self.window_size,
            updater: UpdaterConfig {
                cov_threshold: self.cov_threshold,
                min_track_len: self.min_track_len,
                point_noise_std_px: self.point_noise_std_px,
                line_noise_std_px: self.line_noise_std_px,
                noise_inflation: self.noise_inflation,
                chi2_gate: self.chi2_gate,
                chi2_confidence: self.chi2_confidence,
                max_point_blocks: self.max_point_blocks,
                max_line_blocks: self.max_line_blocks,
                min_pair_parallax: self.min_pair_parallax,
                min_pair_parallax_angle: self.min_pair_parallax_angle,
            },
            imu_noise,
            initial_std: self.initial_std,
            grid: self.grid,
            flow_pixel_tol: self.flow_pixel_tol,
            flow_majority_fraction: self.flow_majority_fraction,
            min_line_obs_px: self.min_line_obs_px,
            cull_lines: true,
            use_points: true,
            use_lines: true,
            delayed_points: false,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_variant() -> Variant {
    Variant::Popl
}
fn default_divergence_ceiling() -> f64 {
    50.0
}

/// Complete experiment description (the `run --config` document).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub filter: FilterTuning,
    #[serde(default)]
    pub alignment: Alignment,
    #[serde(default = "default_divergence_ceiling")]
    pub divergence_ceiling_m: f64,
    /// Outlier injection applied to the generated frames (mismatch model).
    #[serde(default = "default_outlier_fraction")]
    pub inject_outlier_fraction: f64,
    #[serde(default = "default_outlier_magnitude")]
    pub inject_outlier_magnitude_px: f64,
}

fn default_outlier_magnitude() -> f64 {
    25.0
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML config document.
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed required".into()));
        }
        if !(0.0..=1.0).contains(&self.inject_outlier_fraction) {
            return Err(ExperimentError::Config("outlier fraction must be in [0,1]".into()));
        }
        if self.world.duration_s <= 0.0
            || self.world.camera_rate_hz <= 0.0
            || self.world.imu_rate_hz < self.world.camera_rate_hz
        {
            return Err(ExperimentError::Config("invalid world rates/duration".into()));
        }
        if self.filter.window_size < 3 {
            return Err(ExperimentError::Config("window size must be at least 3".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Output paths for one (variant, seed) run.
pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.as_str()).join(seed.to_string())
}

/// Run every seed of the configured experiment, writing
/// `out/<variant>/<seed>/{est.tum, gt.tum, report.jsonl, metrics.json}`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRecord>, ExperimentError> {
    cfg.validate()?;
    let mut records = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_single(cfg, seed, out))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    records.sort_by_key(|r| r.seed);
    Ok(records)
}

/// Run one seed and persist its outputs.
pub fn run_single(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> Result<MetricsRecord, ExperimentError> {
    let world = cfg.world.build(seed);
    let mut data = generate(&world)?;
    if cfg.inject_outlier_fraction > 0.0 {
        inject_outliers(
            &mut data.frames,
            cfg.inject_outlier_fraction,
            cfg.inject_outlier_magnitude_px,
            seed,
        );
    }

    let mut filter_cfg = cfg.filter.to_filter_config(world.noise);
    cfg.variant.apply(&mut filter_cfg);

    let first = world.trajectory.sample(0.0);
    let truth0 = ImuState {
        orientation: first.pose.rotation,
        position: first.pose.position,
        velocity: first.velocity,
        gyro_bias: world.gyro_bias,
        accel_bias: world.accel_bias,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b43_21f0_5eed_1234);
    let initial = VioFilter::perturbed_initial(&truth0, &filter_cfg.initial_std, &mut rng);
    let mut filter = VioFilter::new(filter_cfg, initial, world.cam, world.ext);

    let dir = run_dir(out, cfg.variant, seed);
    fs::create_dir_all(&dir)?;
    let mut report_file = fs::File::create(dir.join("report.jsonl"))?;

    let mut est: Vec<TrajPoint> = Vec::with_capacity(data.frames.len());
    let mut nees_samples = Vec::with_capacity(data.frames.len());
    let mut diverged = false;
    let started = std::time::Instant::now();
    let mut processed = 0usize;

    for frame in &data.frames {
        let report = filter.process_frame(frame, &data.imu)?;
        serde_json::to_writer(&mut report_file, &report)?;
        report_file.write_all(b"\n")?;
        processed += 1;

        est.push((frame.timestamp, filter.state.imu.pose()));
        let err = filter.pose_error(&frame.true_imu_pose);
        nees_samples.push((err, filter.pose_marginal()));

        let pos_err = (filter.state.imu.position - frame.true_imu_pose.position).norm();
        if pos_err > cfg.divergence_ceiling_m {
            diverged = true;
            break;
        }
    }
    let wall_clock_per_frame_ms =
        started.elapsed().as_secs_f64() * 1000.0 / processed.max(1) as f64;

    let max_dt = 0.5 / world.camera_rate_hz;
    let (ate, are) = compute_ate_are(&est, &data.ground_truth, cfg.alignment, max_dt)?;
    let mean_nees = compute_nees(&nees_samples)?;

    let record = MetricsRecord {
        variant: cfg.variant.to_string(),
        seed,
        ate_rmse_m: ate,
        are_rmse_deg: are,
        mean_nees,
        point_utilization: filter.utilization.point_ratio(),
        line_utilization: filter.utilization.line_ratio(),
        frames: processed,
        diverged,
        wall_clock_per_frame_ms,
    };

    let mut est_file = fs::File::create(dir.join("est.tum"))?;
    write_tum(&mut est_file, &est)?;
    let mut gt_file = fs::File::create(dir.join("gt.tum"))?;
    write_tum(&mut gt_file, &data.ground_truth)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&record)?)?;
    fs::write(
        dir.join("timing.json"),
        format!("{{\"wall_clock_per_frame_ms\": {wall_clock_per_frame_ms}}}"),
    )?;
    Ok(record)
}

/// Collect `metrics.json` files under `out/*/*/` back into records.
pub fn collect_records(out: &Path) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut records = Vec::new();
    if !out.exists() {
        return Ok(records);
    }
    for variant_dir in sorted_dirs(out)? {
        for seed_dir in sorted_dirs(&variant_dir)? {
            let path = seed_dir.join("metrics.json");
            if path.exists() {
                let text = fs::read_to_string(&path)?;
                records.push(serde_json::from_str(&text)?);
            }
        }
    }
    Ok(records)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Emulate tracking losses by splitting every line track into chunks of at
/// most `chunk_len` observations (ids are remapped per chunk).
pub fn fragment_line_tracks(frames: &mut [SimFrame], chunk_len: usize) {
    assert!(chunk_len >= 1);
    let mut counters: BTreeMap<u64, usize> = BTreeMap::new();
    for frame in frames {
        let mut remap: BTreeMap<u64, u64> = BTreeMap::new();
        for line in &mut frame.lines {
            let count = counters.entry(line.id).or_insert(0);
            let chunk = *count / chunk_len;
            *count += 1;
            let new_id = line.id * 100_000 + chunk as u64;
            remap.insert(line.id, new_id);
            line.id = new_id;
        }
        for report in &mut frame.flow_reports {
            if let Some(new_id) = remap.get(&report.line_id) {
                report.line_id = *new_id;
            }
        }
        for id in &mut frame.corrupted_lines {
            if let Some(new_id) = remap.get(id) {
                *id = *new_id;
            }
        }
    }
}

/// Paired line-measurement utilization of the immediate pose-only policy vs a
/// delayed trigger, over identical inputs and ground-truth poses.
#[derive(Debug, Clone, Copy)]
pub struct UtilizationComparison {
    pub immediate_ratio: f64,
    pub delayed_ratio: f64,
    pub input_observations: usize,
}

pub fn line_utilization_comparison(
    frames: &[SimFrame],
    world: &SimWorld,
    window_size: usize,
    min_track_len: usize,
    cov_threshold: f64,
    min_pair_parallax_angle: f64,
    delayed_min_parallax_deg: f64,
) -> UtilizationComparison {
    let mut poses: BTreeMap<u64, Pose> = BTreeMap::new();
    let mut immediate_tracks: BTreeMap<u64, LineTrack> = BTreeMap::new();
    let mut delayed_tracks: BTreeMap<u64, LineTrack> = BTreeMap::new();
    let mut input = 0usize;
    let mut fused_immediate = 0usize;
    let mut fused_delayed = 0usize;

    for frame in frames {
        // Window maintenance on ground-truth camera poses.
        poses.insert(
            frame.frame_id,
            world.ext.camera_pose_from_imu(&frame.true_imu_pose),
        );
        while poses.len() > window_size {
            let oldest = *poses.keys().next().unwrap();
            poses.remove(&oldest);
        }
        let oldest = *poses.keys().next().unwrap();
        for tracks in [&mut immediate_tracks, &mut delayed_tracks] {
            for track in tracks.values_mut() {
                track.prune_before(oldest);
            }
            tracks.retain(|_, t| !t.is_empty());
        }

        input += frame.lines.len();
        for l in &frame.lines {
            let Ok(obs) = LineObservation::from_pixels(
                frame.frame_id,
                l.start_pixel,
                l.end_pixel,
                &world.cam,
                5.0,
            ) else {
                continue;
            };
            immediate_tracks
                .entry(l.id)
                .or_insert_with(|| LineTrack::new(l.id))
                .push(obs.clone());
            delayed_tracks.entry(l.id).or_insert_with(|| LineTrack::new(l.id)).push(obs);
        }

        // Immediate policy: one fused measurement per eligible track per frame.
        for track in immediate_tracks.values() {
            if track.get(frame.frame_id).is_none() || track.len() < min_track_len {
                continue;
            }
            if select_line_base_frames(track, &poses, cov_threshold, min_pair_parallax_angle)
                .is_ok()
            {
                fused_immediate += 1;
            }
        }

        // Delayed policy: fuse all observations at loss or max length.
        let ids: Vec<u64> = delayed_tracks.keys().copied().collect();
        for id in ids {
            let track = &delayed_tracks[&id];
            let lost = track.get(frame.frame_id).is_none();
            let maxed = track.len() >= window_size;
            if lost || maxed {
                let track = delayed_tracks.remove(&id).unwrap();
                fused_delayed += delayed_line_fusable(
                    &track,
                    &poses,
                    min_track_len,
                    delayed_min_parallax_deg,
                );
            }
        }
    }
    UtilizationComparison {
        immediate_ratio: fused_immediate as f64 / input.max(1) as f64,
        delayed_ratio: fused_delayed as f64 / input.max(1) as f64,
        input_observations: input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.variant, Variant::Popl);
        assert_eq!(cfg.seeds, vec![0]);
        let text = cfg.to_toml_string();
        let parsed = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed.variant, cfg.variant);
        assert_eq!(parsed.filter.window_size, 11);
        assert_eq!(parsed.filter.cov_threshold, 0.25);
    }

    #[test]
    fn config_rejects_garbage() {
        assert!(ExperimentConfig::from_toml_str("variant = \"nonsense\"").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml_str("not even toml [").is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_field = 3").is_err());
        let bad_rates = "[world]\nimu_rate_hz = 1.0";
        assert!(ExperimentConfig::from_toml_str(bad_rates).is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in [
            Variant::Popl,
            Variant::PointsOnlyPo,
            Variant::PoplNoCull,
            Variant::DelayedBaseline,
        ] {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn fragmentation_splits_tracks() {
        let mut world = SimWorld::default_room(31);
        world.enforce_visibility = false;
        world.duration_s = 3.0;
        let mut data = generate(&world).unwrap();
        fragment_line_tracks(&mut data.frames, 4);
        // Every remapped id appears at most 4 times in total.
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for frame in &data.frames {
            for l in &frame.lines {
                *counts.entry(l.id).or_insert(0) += 1;
            }
        }
        assert!(counts.values().all(|&c| c <= 4));
        assert!(counts.len() > 10);
    }
}
