//! Error-state propagation of the IMU state and covariance from raw
//! gyro/accel samples.
//!
//! Measurement model: `w_m = w + bg + ng`, `a_m = R * (a_world + g) + ba + na`
//! with `R` the world->IMU rotation and `g` the configured world-frame gravity
//! vector. The mean is integrated with RK4 (measurements linearly interpolated
//! inside each sample interval); the error-state transition is the matrix
//! exponential of the 15x15 linearization evaluated at the interval midpoint.

use nalgebra::{Quaternion, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Rotation};
use crate::state::{Covariance, FilterState, IMU_ERROR_DIM};

pub type TransitionMatrix = SMatrix<f64, IMU_ERROR_DIM, IMU_ERROR_DIM>;
type NoiseInput = SMatrix<f64, IMU_ERROR_DIM, 12>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagationError {
    #[error("empty IMU sample batch")]
    EmptyBatch,
    #[error("non-monotonic IMU timestamps at t={0}")]
    NonMonotonicTimestamps(f64),
    #[error("samples do not cover [{0}, {1}]")]
    InsufficientCoverage(f64, f64),
}

/// One raw inertial sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Measured angular velocity, rad/s (body frame).
    pub angular_velocity: Vector3<f64>,
    /// Measured linear acceleration, m/s^2 (body frame).
    pub linear_acceleration: Vector3<f64>,
}

/// Continuous-time IMU noise densities and the world gravity vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gyro white-noise density, rad/s/sqrt(Hz).
    pub gyro_noise_density: f64,
    /// Accel white-noise density, m/s^2/sqrt(Hz).
    pub accel_noise_density: f64,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub gyro_bias_random_walk: f64,
    /// Accel bias random walk, m/s^3/sqrt(Hz).
    pub accel_bias_random_walk: f64,
    /// Gravity vector in the world frame, m/s^2.
    pub gravity: [f64; 3],
}

impl NoiseConfig {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    pub fn validate(&self) -> bool {
        self.gyro_noise_density >= 0.0
            && self.accel_noise_density >= 0.0
            && self.gyro_bias_random_walk >= 0.0
            && self.accel_bias_random_walk >= 0.0
    }

    pub fn zero() -> Self {
        NoiseConfig {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_random_walk: 0.0,
            accel_bias_random_walk: 0.0,
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        // Consumer-grade MEMS ballpark.
        NoiseConfig {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_random_walk: 2.0e-5,
            accel_bias_random_walk: 3.0e-4,
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

/// Mean integration state: raw quaternion plus position and velocity.
#[derive(Clone, Copy)]
struct MeanState {
    q: Quaternion<f64>,
    p: Vector3<f64>,
    v: Vector3<f64>,
}

#[derive(Clone, Copy)]
struct MeanDerivative {
    dq: Quaternion<f64>,
    dp: Vector3<f64>,
    dv: Vector3<f64>,
}

fn mean_derivative(
    s: &MeanState,
    omega: &Vector3<f64>,
    accel: &Vector3<f64>,
    gravity: &Vector3<f64>,
) -> MeanDerivative {
    let qn = s.q.normalize();
    let rot = Rotation::from_wxyz(qn.w, qn.i, qn.j, qn.k);
    // World->IMU kinematics: dR/dt = -[w]x R  =>  dq/dt = -1/2 (0,w) * q.
    let dq = Quaternion::from_imag(*omega) * qn * -0.5;
    MeanDerivative { dq, dp: s.v, dv: rot.rotate_back(accel) - gravity }
}

fn rk4_step(
    s: &MeanState,
    m0: (&Vector3<f64>, &Vector3<f64>),
    m1: (&Vector3<f64>, &Vector3<f64>),
    dt: f64,
    gravity: &Vector3<f64>,
) -> MeanState {
    let mid_w = (m0.0 + m1.0) * 0.5;
    let mid_a = (m0.1 + m1.1) * 0.5;

    let k1 = mean_derivative(s, m0.0, m0.1, gravity);
    let s2 = MeanState { q: s.q + k1.dq * (dt / 2.0), p: s.p + k1.dp * (dt / 2.0), v: s.v + k1.dv * (dt / 2.0) };
    let k2 = mean_derivative(&s2, &mid_w, &mid_a, gravity);
    let s3 = MeanState { q: s.q + k2.dq * (dt / 2.0), p: s.p + k2.dp * (dt / 2.0), v: s.v + k2.dv * (dt / 2.0) };
    let k3 = mean_derivative(&s3, &mid_w, &mid_a, gravity);
    let s4 = MeanState { q: s.q + k3.dq * dt, p: s.p + k3.dp * dt, v: s.v + k3.dv * dt };
    let k4 = mean_derivative(&s4, m1.0, m1.1, gravity);

    let q = s.q + (k1.dq + k2.dq * 2.0 + k3.dq * 2.0 + k4.dq) * (dt / 6.0);
    MeanState {
        q: q.normalize(),
        p: s.p + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * (dt / 6.0),
        v: s.v + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * (dt / 6.0),
    }
}

/// Continuous error-state dynamics matrix, order [theta p v bg ba].
fn error_dynamics(rot: &Rotation, omega: &Vector3<f64>, accel: &Vector3<f64>) -> TransitionMatrix {
    let mut f = TransitionMatrix::zeros();
    let rt = rot.matrix().transpose();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(omega)));
    f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-nalgebra::Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&nalgebra::Matrix3::identity());
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rt * skew(accel)));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-rt));
    f
}

fn noise_input(rot: &Rotation) -> NoiseInput {
    let mut g = NoiseInput::zeros();
    let rt = rot.matrix().transpose();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-nalgebra::Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-rt));
    g.fixed_view_mut::<3, 3>(9, 6).copy_from(&nalgebra::Matrix3::identity());
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&nalgebra::Matrix3::identity());
    g
}

/// Matrix exponential by scaling-and-squaring over a Taylor series.
fn expm(a: &TransitionMatrix) -> TransitionMatrix {
    let norm = a.abs().max() * IMU_ERROR_DIM as f64;
    let scalings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(scalings);
    let mut result = TransitionMatrix::identity();
    let mut term = TransitionMatrix::identity();
    for k in 1..=14 {
        term = term * scaled / k as f64;
        result += term;
        if term.abs().max() < 1e-17 {
            break;
        }
    }
    for _ in 0..scalings {
        result = result * result;
    }
    result
}

fn interp(a: &Vector3<f64>, b: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    a * (1.0 - alpha) + b * alpha
}

/// Restrict `samples` to `[t_start, t_end]`, synthesizing interpolated
/// boundary samples so the returned batch covers the horizon exactly.
pub fn slice_with_boundary_interpolation(
    samples: &[ImuSample],
    t_start: f64,
    t_end: f64,
) -> Result<Vec<ImuSample>, PropagationError> {
    if samples.is_empty() {
        return Err(PropagationError::EmptyBatch);
    }
    if samples.first().unwrap().timestamp > t_start + 1e-12
        || samples.last().unwrap().timestamp < t_end - 1e-12
    {
        return Err(PropagationError::InsufficientCoverage(t_start, t_end));
    }
    let at = |t: f64| -> ImuSample {
        let idx = samples.partition_point(|s| s.timestamp <= t);
        if idx == 0 {
            return samples[0];
        }
        if idx >= samples.len() {
            return *samples.last().unwrap();
        }
        let (a, b) = (&samples[idx - 1], &samples[idx]);
        let span = b.timestamp - a.timestamp;
        let alpha = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
        ImuSample {
            timestamp: t,
            angular_velocity: interp(&a.angular_velocity, &b.angular_velocity, alpha),
            linear_acceleration: interp(&a.linear_acceleration, &b.linear_acceleration, alpha),
        }
    };
    let mut out = vec![at(t_start)];
    for s in samples {
        if s.timestamp > t_start + 1e-12 && s.timestamp < t_end - 1e-12 {
            out.push(*s);
        }
    }
    out.push(at(t_end));
    Ok(out)
}

/// Propagate mean and covariance across an IMU sample batch.
///
/// Clone and calibration blocks receive an identity transition and zero
/// process noise; only the 15x15 IMU block evolves. Returns the accumulated
/// IMU-block transition matrix.
pub fn propagate(
    state: &mut FilterState,
    cov: &mut Covariance,
    samples: &[ImuSample],
    noise: &NoiseConfig,
) -> Result<TransitionMatrix, PropagationError> {
    if samples.is_empty() {
        return Err(PropagationError::EmptyBatch);
    }
    for w in samples.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(PropagationError::NonMonotonicTimestamps(w[1].timestamp));
        }
    }
    let gravity = noise.gravity_vector();
    let (bg, ba) = (state.imu.gyro_bias, state.imu.accel_bias);
    let (qw, qx, qy, qz) = state.imu.orientation.wxyz();
    let mut mean = MeanState {
        q: Quaternion::new(qw, qx, qy, qz),
        p: state.imu.position,
        v: state.imu.velocity,
    };

    let mut phi_total = TransitionMatrix::identity();
    let d = cov.dim();
    let qc = {
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for i in 0..3 {
            q[(i, i)] = noise.gyro_noise_density.powi(2);
            q[(3 + i, 3 + i)] = noise.accel_noise_density.powi(2);
            q[(6 + i, 6 + i)] = noise.gyro_bias_random_walk.powi(2);
            q[(9 + i, 9 + i)] = noise.accel_bias_random_walk.powi(2);
        }
        q
    };

    for w in samples.windows(2) {
        let dt = w[1].timestamp - w[0].timestamp;
        let w0 = w[0].angular_velocity - bg;
        let a0 = w[0].linear_acceleration - ba;
        let w1 = w[1].angular_velocity - bg;
        let a1 = w[1].linear_acceleration - ba;
        let at = |alpha: f64| (interp(&w0, &w1, alpha), interp(&a0, &a1, alpha));

        // Commutator-free fourth-order transition: linearize at the two
        // Gauss nodes of the interval and compose two matrix exponentials.
        let dynamics_at = |s: &MeanState, alpha: f64| {
            let qn = s.q.normalize();
            let rot = Rotation::from_wxyz(qn.w, qn.i, qn.j, qn.k);
            let (wm, am) = at(alpha);
            (error_dynamics(&rot, &wm, &am), noise_input(&rot))
        };
        let sqrt3_6 = 3f64.sqrt() / 6.0;
        let (c1, c2) = (0.5 - sqrt3_6, 0.5 + sqrt3_6);
        let (alpha1, alpha2) = (0.25 + sqrt3_6, 0.25 - sqrt3_6);

        let m0 = at(0.0);
        let mc1 = at(c1);
        let s_c1 = rk4_step(&mean, (&m0.0, &m0.1), (&mc1.0, &mc1.1), c1 * dt, &gravity);
        let mc2 = at(c2);
        let s_c2 =
            rk4_step(&s_c1, (&mc1.0, &mc1.1), (&mc2.0, &mc2.1), (c2 - c1) * dt, &gravity);
        let (f1, g1) = dynamics_at(&s_c1, c1);
        let (f2, g2) = dynamics_at(&s_c2, c2);
        let phi_a = expm(&((f1 * alpha2 + f2 * alpha1) * dt));
        let phi_b = expm(&((f1 * alpha1 + f2 * alpha2) * dt));
        let phi = phi_a * phi_b;

        // Trapezoidal discrete noise, first-order accurate in dt.
        let gqg_1 = g1 * qc * g1.transpose();
        let gqg_2 = g2 * qc * g2.transpose();
        let gqg = (gqg_1 + gqg_2) * 0.5;
        let qd = (gqg + phi * gqg * phi.transpose()) * (0.5 * dt);

        let m50 = at(0.5);
        let half = rk4_step(&mean, (&m0.0, &m0.1), (&m50.0, &m50.1), dt / 2.0, &gravity);
        let m1 = at(1.0);
        mean = rk4_step(&half, (&m50.0, &m50.1), (&m1.0, &m1.1), dt / 2.0, &gravity);
        phi_total = phi * phi_total;

        // Block covariance update: P_II, P_IC and the transpose strip.
        let m = cov.as_matrix_mut();
        let p_ii = m.view((0, 0), (IMU_ERROR_DIM, IMU_ERROR_DIM)).into_owned();
        let new_ii = &phi * &p_ii * phi.transpose() + qd;
        m.view_mut((0, 0), (IMU_ERROR_DIM, IMU_ERROR_DIM)).copy_from(&new_ii);
        if d > IMU_ERROR_DIM {
            let rest = d - IMU_ERROR_DIM;
            let p_ic = m.view((0, IMU_ERROR_DIM), (IMU_ERROR_DIM, rest)).into_owned();
            let new_ic = &phi * &p_ic;
            m.view_mut((0, IMU_ERROR_DIM), (IMU_ERROR_DIM, rest)).copy_from(&new_ic);
            m.view_mut((IMU_ERROR_DIM, 0), (rest, IMU_ERROR_DIM)).copy_from(&new_ic.transpose());
        }
    }
    cov.resymmetrize();

    let qn = mean.q.normalize();
    state.imu.orientation = Rotation::from_wxyz(qn.w, qn.i, qn.j, qn.k);
    state.imu.position = mean.p;
    state.imu.velocity = mean.v;
    Ok(phi_total)
}
