//! Ground-truth trajectories with closed-form derivatives and body rates.

use nalgebra::Vector3;

use crate::geometry::{Pose, Rotation};

/// Trajectory families. All expose analytic position, velocity, acceleration
/// and body angular rate, so synthesized IMU streams are exactly consistent
/// with the ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectorySpec {
    /// Horizontal circle with tangent-following yaw.
    Circle { radius_m: f64, period_s: f64, height_m: f64 },
    /// Independent sinusoids per axis with a constant yaw rate.
    Sinusoid3d {
        amplitude_m: [f64; 3],
        frequency_hz: [f64; 3],
        center: [f64; 3],
        yaw_rate_rad_s: f64,
    },
    /// Catmull-Rom spline through waypoints, constant yaw rate.
    Waypoints { points: Vec<[f64; 3]>, duration_s: f64, yaw_rate_rad_s: f64 },
}

/// Kinematic sample of the trajectory at one instant.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    /// World->IMU pose.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Angular velocity in the body frame.
    pub body_rate: Vector3<f64>,
}

/// World->body rotation for a yaw angle (body x axis heading `yaw`).
fn yaw_rotation(yaw: f64) -> Rotation {
    Rotation::from_scaled_axis(Vector3::new(0.0, 0.0, yaw)).inverse()
}

impl TrajectorySpec {
    pub fn sample(&self, t: f64) -> TrajectorySample {
        match self {
            TrajectorySpec::Circle { radius_m, period_s, height_m } => {
                let rate = 2.0 * std::f64::consts::PI / period_s;
                let theta = rate * t;
                let (s, c) = theta.sin_cos();
                let position = Vector3::new(radius_m * c, radius_m * s, *height_m);
                let velocity = Vector3::new(-radius_m * s, radius_m * c, 0.0) * rate;
                let acceleration = Vector3::new(-c, -s, 0.0) * (*radius_m * rate * rate);
                // Body x along the velocity direction: yaw = theta + pi/2.
                let yaw = theta + std::f64::consts::FRAC_PI_2;
                TrajectorySample {
                    pose: Pose::new(yaw_rotation(yaw), position),
                    velocity,
                    acceleration,
                    body_rate: Vector3::new(0.0, 0.0, rate),
                }
            }
            TrajectorySpec::Sinusoid3d { amplitude_m, frequency_hz, center, yaw_rate_rad_s } => {
                let phases = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
                let mut position = Vector3::zeros();
                let mut velocity = Vector3::zeros();
                let mut acceleration = Vector3::zeros();
                for i in 0..3 {
                    let w = 2.0 * std::f64::consts::PI * frequency_hz[i];
                    let arg = w * t + phases[i];
                    position[i] = center[i] + amplitude_m[i] * arg.sin();
                    velocity[i] = amplitude_m[i] * w * arg.cos();
                    acceleration[i] = -amplitude_m[i] * w * w * arg.sin();
                }
                TrajectorySample {
                    pose: Pose::new(yaw_rotation(yaw_rate_rad_s * t), position),
                    velocity,
                    acceleration,
                    body_rate: Vector3::new(0.0, 0.0, *yaw_rate_rad_s),
                }
            }
            TrajectorySpec::Waypoints { points, duration_s, yaw_rate_rad_s } => {
                let (position, velocity, acceleration) =
                    catmull_rom(points, (t / duration_s).clamp(0.0, 1.0), *duration_s);
                TrajectorySample {
                    pose: Pose::new(yaw_rotation(yaw_rate_rad_s * t), position),
                    velocity,
                    acceleration,
                    body_rate: Vector3::new(0.0, 0.0, *yaw_rate_rad_s),
                }
            }
        }
    }
}

fn wp(points: &[[f64; 3]], idx: isize) -> Vector3<f64> {
    let clamped = idx.clamp(0, points.len() as isize - 1) as usize;
    Vector3::from(points[clamped])
}

/// Catmull-Rom position/velocity/acceleration at normalized time `u01`.
fn catmull_rom(
    points: &[[f64; 3]],
    u01: f64,
    duration_s: f64,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    if points.len() < 2 {
        let p = points.first().map(|p| Vector3::from(*p)).unwrap_or_default();
        return (p, Vector3::zeros(), Vector3::zeros());
    }
    let segments = (points.len() - 1) as f64;
    let u = u01 * segments;
    let seg = (u.floor() as isize).clamp(0, points.len() as isize - 2);
    let s = u - seg as f64;
    let p0 = wp(points, seg - 1);
    let p1 = wp(points, seg);
    let p2 = wp(points, seg + 1);
    let p3 = wp(points, seg + 2);

    let a = p1 * 2.0;
    let b = p2 - p0;
    let c = p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3;
    let d = -p0 + p1 * 3.0 - p2 * 3.0 + p3;
    let pos = (a + b * s + c * (s * s) + d * (s * s * s)) * 0.5;
    // du/dt converts spline-parameter derivatives to time derivatives.
    let du_dt = segments / duration_s;
    let vel = (b + c * (2.0 * s) + d * (3.0 * s * s)) * 0.5 * du_dt;
    let acc = (c * 2.0 + d * (6.0 * s)) * 0.5 * du_dt * du_dt;
    (pos, vel, acc)
}
