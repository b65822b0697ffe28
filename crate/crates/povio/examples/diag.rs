//! Scratch diagnostics for filter tuning (not part of the test suite).

use povio::experiment::{ExperimentConfig, Variant};
use povio::filter::VioFilter;
use povio::sim::generate;
use povio::state::ImuState;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_default();
    let mut cfg = ExperimentConfig::default();
    cfg.variant = Variant::Popl;
    if mode == "converge" {
        // Noise-free measurements, perturbed init: the filter must converge.
        cfg.world.pixel_noise_point = 0.0;
        cfg.world.pixel_noise_line = 0.0;
        cfg.world.imu_noise = povio::propagation::NoiseConfig::zero();
        cfg.filter.chi2_gate = false;
        cfg.filter.initial_std = povio::filter::InitialStd {
            orientation_rad: 0.02,
            position_m: 0.10,
            velocity: 0.05,
            gyro_bias: 1e-3,
            accel_bias: 1e-2,
        };
    }
    let world = cfg.world.build(0);
    let data = generate(&world).unwrap();
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
    let initial = if mode == "converge" {
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(99);
        VioFilter::perturbed_initial(&truth0, &cfg.filter.initial_std, &mut rng)
    } else {
        truth0
    };
    let mut filter = VioFilter::new(filter_cfg, initial, world.cam, world.ext);
    let n_frames = if mode == "long" { 400 } else { 60 };
    let stride = if mode == "long" { 40 } else { 10 };
    for frame in data.frames.iter().take(n_frames) {
        let report = filter.process_frame(frame, &data.imu).unwrap();
        if frame.frame_id % stride as u64 == 0 {
            let s_true = world.trajectory.sample(frame.timestamp);
            let v_err = (filter.state.imu.velocity - s_true.velocity).norm();
            let ba_err = (filter.state.imu.accel_bias - world.accel_bias).norm();
            let bg_err = (filter.state.imu.gyro_bias - world.gyro_bias).norm();
            let p = filter.cov.as_matrix();
            eprintln!(
                "   t {:5.1} verr {:7.4} ba_err {:7.4} bg_err {:7.5} Ppos {:9.2e} Pvel {:9.2e} Pba {:9.2e}",
                frame.timestamp, v_err, ba_err, bg_err,
                p[(3, 3)], p[(6, 6)], p[(12, 12)]
            );
        }
        if frame.frame_id % stride as u64 == 0 {
            let err = (filter.state.imu.position - frame.true_imu_pose.position).norm();
            println!(
                "frame {:4} in p/l {:3}/{:2} acc {:3}/{:2} prej({} {} {} {}) lrej({} {} {} {}) chi2 mean {:8.2} max {:9.2} corr {:.4} err {:.4}",
                frame.frame_id,
                report.point_input,
                report.line_input,
                report.point_accepted,
                report.line_accepted,
                report.point_rejections.too_short,
                report.point_rejections.unstable,
                report.point_rejections.degenerate,
                report.point_rejections.gated,
                report.line_rejections.too_short,
                report.line_rejections.unstable,
                report.line_rejections.degenerate,
                report.line_rejections.gated,
                report.mean_chi2,
                report.max_chi2,
                report.correction_norm,
                err
            );
        }
    }
}
