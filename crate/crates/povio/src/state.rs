//! Filter state container and covariance bookkeeping.
//!
//! Error-state layout (row/column order of [`Covariance`]):
//!
//! ```text
//! [ imu theta(3) p(3) v(3) bg(3) ba(3) | cam(8)? | ext(6)? | clone_0(6) ... clone_{n-1}(6) ]
//! ```
//!
//! The camera-intrinsics and extrinsics calibration blocks are present only
//! when the corresponding `calibrate_*` flag is set. Clones are ordered oldest
//! to newest; each clone error is `[theta(3), p(3)]` of the cloned IMU pose.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Extrinsics, Pose, Rotation};

/// Error-state dimension of the current IMU state.
pub const IMU_ERROR_DIM: usize = 15;
/// Error-state dimension of one cloned pose.
pub const CLONE_ERROR_DIM: usize = 6;
/// Number of camera-intrinsic calibration parameters.
pub const CAM_PARAMS: usize = 8;
/// Error-state dimension of the IMU-camera extrinsics.
pub const EXT_PARAMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("clone window is full (capacity {0}); marginalize first")]
    WindowFull(usize),
    #[error("clone window is empty")]
    NoClones,
    #[error("correction has dimension {got}, state expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("clone timestamp {0} does not increase over window end {1}")]
    NonIncreasingTimestamp(f64, f64),
}

/// Current inertial state.
#[derive(Debug, Clone, Copy)]
pub struct ImuState {
    /// World->IMU orientation.
    pub orientation: Rotation,
    /// IMU position in the world, meters.
    pub position: Vector3<f64>,
    /// IMU velocity in the world, m/s.
    pub velocity: Vector3<f64>,
    /// Gyroscope bias, rad/s.
    pub gyro_bias: Vector3<f64>,
    /// Accelerometer bias, m/s^2.
    pub accel_bias: Vector3<f64>,
}

impl ImuState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation, self.position)
    }
}

impl Default for ImuState {
    fn default() -> Self {
        ImuState {
            orientation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

/// One cloned IMU pose kept in the sliding window.
#[derive(Debug, Clone, Copy)]
pub struct ClonedPose {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
}

/// Sliding window of cloned IMU poses, oldest first.
#[derive(Debug, Clone)]
pub struct CloneWindow {
    entries: Vec<ClonedPose>,
    capacity: usize,
}

impl CloneWindow {
    pub fn new(capacity: usize) -> Self {
        CloneWindow { entries: Vec::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClonedPose> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> Option<&ClonedPose> {
        self.entries.get(index)
    }

    pub fn index_of(&self, frame_id: u64) -> Option<usize> {
        self.entries.iter().position(|c| c.frame_id == frame_id)
    }

    pub fn by_frame(&self, frame_id: u64) -> Option<&ClonedPose> {
        self.index_of(frame_id).map(|i| &self.entries[i])
    }

    pub fn oldest(&self) -> Option<&ClonedPose> {
        self.entries.first()
    }

    pub fn newest(&self) -> Option<&ClonedPose> {
        self.entries.last()
    }
}

/// Complete filter state: inertial state, clone window and calibration.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub imu: ImuState,
    pub clones: CloneWindow,
    pub cam: CameraIntrinsics,
    pub ext: Extrinsics,
    pub calibrate_cam: bool,
    pub calibrate_ext: bool,
}

impl FilterState {
    pub fn new(
        imu: ImuState,
        window_capacity: usize,
        cam: CameraIntrinsics,
        ext: Extrinsics,
    ) -> Self {
        FilterState {
            imu,
            clones: CloneWindow::new(window_capacity),
            cam,
            ext,
            calibrate_cam: false,
            calibrate_ext: false,
        }
    }

    /// Total error-state dimension for the current configuration.
    pub fn error_dim(&self) -> usize {
        IMU_ERROR_DIM
            + if self.calibrate_cam { CAM_PARAMS } else { 0 }
            + if self.calibrate_ext { EXT_PARAMS } else { 0 }
            + CLONE_ERROR_DIM * self.clones.len()
    }

    /// Column offset of the camera-intrinsics block, if calibrated.
    pub fn cam_offset(&self) -> Option<usize> {
        self.calibrate_cam.then_some(IMU_ERROR_DIM)
    }

    /// Column offset of the extrinsics block, if calibrated.
    pub fn ext_offset(&self) -> Option<usize> {
        self.calibrate_ext
            .then_some(IMU_ERROR_DIM + if self.calibrate_cam { CAM_PARAMS } else { 0 })
    }

    /// Column offset of the first clone block.
    pub fn clones_offset(&self) -> usize {
        IMU_ERROR_DIM
            + if self.calibrate_cam { CAM_PARAMS } else { 0 }
            + if self.calibrate_ext { EXT_PARAMS } else { 0 }
    }

    /// Column offset of the clone at window index `index`.
    pub fn clone_offset(&self, index: usize) -> usize {
        self.clones_offset() + CLONE_ERROR_DIM * index
    }

    /// Column offset of the clone holding `frame_id`.
    pub fn clone_offset_by_frame(&self, frame_id: u64) -> Option<usize> {
        self.clones.index_of(frame_id).map(|i| self.clone_offset(i))
    }

    /// Current IMU pose.
    pub fn imu_pose(&self) -> Pose {
        self.imu.pose()
    }

    /// Camera pose derived from the clone holding `frame_id`.
    pub fn camera_pose_of_clone(&self, frame_id: u64) -> Option<Pose> {
        self.clones.by_frame(frame_id).map(|c| self.ext.camera_pose_from_imu(&c.pose))
    }
}

/// Symmetric error-state covariance whose layout mirrors [`FilterState`].
#[derive(Debug, Clone)]
pub struct Covariance {
    m: DMatrix<f64>,
}

impl Covariance {
    pub fn zeros(dim: usize) -> Self {
        Covariance { m: DMatrix::zeros(dim, dim) }
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let mut c = Covariance { m };
        c.resymmetrize();
        c
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.m
    }

    /// Replace `P` with `(P + P^T)/2`.
    pub fn resymmetrize(&mut self) {
        let t = self.m.transpose();
        self.m += t;
        self.m *= 0.5;
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Smallest eigenvalue (symmetric part); diagnostic for PSD audits.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.m + self.m.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.m - self.m.transpose()).abs().max()
    }
}

/// Clone the current IMU pose into the window and grow the covariance.
///
/// The new clone error equals the current IMU pose error, so the appended
/// rows/columns are an identity-Jacobian copy of the IMU pose block.
pub fn augment_clone(
    state: &mut FilterState,
    cov: &mut Covariance,
    frame_id: u64,
    timestamp: f64,
) -> Result<(), StateError> {
    if state.clones.is_full() {
        return Err(StateError::WindowFull(state.clones.capacity()));
    }
    if let Some(last) = state.clones.newest() {
        if timestamp <= last.timestamp {
            return Err(StateError::NonIncreasingTimestamp(timestamp, last.timestamp));
        }
    }
    let d = state.error_dim();
    debug_assert_eq!(cov.dim(), d);

    let mut grown = DMatrix::zeros(d + CLONE_ERROR_DIM, d + CLONE_ERROR_DIM);
    grown.view_mut((0, 0), (d, d)).copy_from(cov.as_matrix());
    // New rows/cols are the pose block (theta, p) of the IMU error state.
    let pose_rows = cov.as_matrix().view((0, 0), (CLONE_ERROR_DIM, d)).into_owned();
    grown.view_mut((d, 0), (CLONE_ERROR_DIM, d)).copy_from(&pose_rows);
    grown.view_mut((0, d), (d, CLONE_ERROR_DIM)).copy_from(&pose_rows.transpose());
    grown
        .view_mut((d, d), (CLONE_ERROR_DIM, CLONE_ERROR_DIM))
        .copy_from(&cov.as_matrix().view((0, 0), (CLONE_ERROR_DIM, CLONE_ERROR_DIM)).into_owned());

    state.clones.entries.push(ClonedPose { frame_id, timestamp, pose: state.imu.pose() });
    *cov = Covariance::from_matrix(grown);
    Ok(())
}

/// Drop the oldest clone and the corresponding covariance rows/columns.
pub fn marginalize_oldest(
    state: &mut FilterState,
    cov: &mut Covariance,
) -> Result<ClonedPose, StateError> {
    if state.clones.is_empty() {
        return Err(StateError::NoClones);
    }
    let off = state.clone_offset(0);
    let removed = state.clones.entries.remove(0);
    let kept = cov
        .as_matrix()
        .clone()
        .remove_rows(off, CLONE_ERROR_DIM)
        .remove_columns(off, CLONE_ERROR_DIM);
    *cov = Covariance::from_matrix(kept);
    Ok(removed)
}

/// Inject an error-state correction into the state.
///
/// Vector entries add; rotations update multiplicatively with the
/// left-multiplicative small-angle convention.
pub fn apply_correction(state: &mut FilterState, delta: &DVector<f64>) -> Result<(), StateError> {
    let d = state.error_dim();
    if delta.len() != d {
        return Err(StateError::DimensionMismatch { expected: d, got: delta.len() });
    }
    let theta = Vector3::new(delta[0], delta[1], delta[2]);
    state.imu.orientation = state.imu.orientation.perturb_left(&theta);
    state.imu.orientation.renormalize();
    state.imu.position += Vector3::new(delta[3], delta[4], delta[5]);
    state.imu.velocity += Vector3::new(delta[6], delta[7], delta[8]);
    state.imu.gyro_bias += Vector3::new(delta[9], delta[10], delta[11]);
    state.imu.accel_bias += Vector3::new(delta[12], delta[13], delta[14]);

    if let Some(off) = state.cam_offset() {
        let d: Vec<f64> = (0..CAM_PARAMS).map(|i| delta[off + i]).collect();
        state.cam.apply_param_delta(&d);
    }
    if let Some(off) = state.ext_offset() {
        let theta = Vector3::new(delta[off], delta[off + 1], delta[off + 2]);
        state.ext.rotation_imu_to_camera = state.ext.rotation_imu_to_camera.perturb_left(&theta);
        state.ext.rotation_imu_to_camera.renormalize();
        state.ext.imu_position_in_camera +=
            Vector3::new(delta[off + 3], delta[off + 4], delta[off + 5]);
    }
    let base = state.clones_offset();
    for (i, clone) in state.clones.entries.iter_mut().enumerate() {
        let off = base + CLONE_ERROR_DIM * i;
        let theta = Vector3::new(delta[off], delta[off + 1], delta[off + 2]);
        clone.pose.rotation = clone.pose.rotation.perturb_left(&theta);
        clone.pose.rotation.renormalize();
        clone.pose.position += Vector3::new(delta[off + 3], delta[off + 4], delta[off + 5]);
    }
    Ok(())
}

/// Debug snapshot of the state plus the covariance diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct StateSnapshot {
    pub imu: ImuSnapshot,
    pub clones: Vec<CloneSnapshot>,
    pub covariance_diagonal: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImuSnapshot {
    pub quaternion_wxyz: [f64; 4],
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct CloneSnapshot {
    pub frame_id: u64,
    pub timestamp: f64,
    pub quaternion_wxyz: [f64; 4],
    pub position: [f64; 3],
}

/// Build a JSON-serializable snapshot for debugging.
pub fn snapshot(state: &FilterState, cov: &Covariance) -> StateSnapshot {
    let (w, x, y, z) = state.imu.orientation.wxyz();
    StateSnapshot {
        imu: ImuSnapshot {
            quaternion_wxyz: [w, x, y, z],
            position: state.imu.position.into(),
            velocity: state.imu.velocity.into(),
            gyro_bias: state.imu.gyro_bias.into(),
            accel_bias: state.imu.accel_bias.into(),
        },
        clones: state
            .clones
            .iter()
            .map(|c| {
                let (w, x, y, z) = c.pose.rotation.wxyz();
                CloneSnapshot {
                    frame_id: c.frame_id,
                    timestamp: c.timestamp,
                    quaternion_wxyz: [w, x, y, z],
                    position: c.pose.position.into(),
                }
            })
            .collect(),
        covariance_diagonal: cov.as_matrix().diagonal().iter().copied().collect(),
    }
}
