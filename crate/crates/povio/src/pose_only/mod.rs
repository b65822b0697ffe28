//! Pose-only measurement models for point and line features.
//!
//! Both models express a feature's geometry (depth for points,
//! direction/distance for lines) as closed-form functions of two base camera
//! poses, so the resulting measurement equations constrain camera poses only
//! and contain no feature coordinates.

pub mod base_frames;
pub mod line;
pub mod point;

use nalgebra::SMatrix;
use thiserror::Error;

use crate::geometry::{skew, Extrinsics, Pose, Rotation};

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Errors raised by the pose-only models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// Pair geometry is unobservable (zero parallax / parallel planes).
    #[error("degenerate pair geometry: {0}")]
    DegenerateGeometry(&'static str),
    /// Predicted point lies behind the current camera.
    #[error("predicted point behind camera (z = {0})")]
    BehindCamera(f64),
    /// Line endpoints collinear with the optical center.
    #[error("degenerate line endpoints")]
    DegenerateEndpoints,
    /// Pixel-space line coefficients have near-zero normal.
    #[error("degenerate image line")]
    DegenerateLine,
}

/// Jacobian of a camera-pose error w.r.t. the corresponding IMU-pose error,
/// rows/cols ordered `[theta(3), p(3)]`.
pub(crate) fn cam_from_imu_jacobian(imu_rotation: &Rotation, ext: &Extrinsics) -> Matrix6 {
    let mut j = Matrix6::zeros();
    let r_ic = ext.rotation_imu_to_camera.matrix();
    let lever = ext.rotation_imu_to_camera.rotate_back(&ext.imu_position_in_camera);
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_ic);
    j.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(imu_rotation.matrix().transpose() * skew(&lever)));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&nalgebra::Matrix3::identity());
    j
}

/// Jacobian of a camera-pose error w.r.t. the extrinsics error,
/// rows `[theta_c(3), p_c(3)]`, cols `[theta_ext(3), p_ext(3)]`.
pub(crate) fn cam_from_ext_jacobian(cam_pose: &Pose, ext: &Extrinsics) -> Matrix6 {
    let mut j = Matrix6::zeros();
    let rt = cam_pose.rotation.matrix().transpose();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rt * skew(&ext.imu_position_in_camera)));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rt));
    j
}
