//! Pose-only point/line visual-inertial odometry.
//!
//! An error-state Kalman filter over a sliding window of cloned IMU poses,
//! where point and line features constrain the poses through closed-form
//! pose-only measurement models instead of triangulated coordinates. The
//! crate also ships a synthetic-world simulator, trajectory metrics, and a
//! batch experiment runner used by the `povio` CLI.

pub mod culling;
pub mod experiment;
pub mod filter;
pub mod metrics;
pub mod sim;
pub mod updater;
pub mod geometry;
pub mod pose_only;
pub mod propagation;
pub mod state;

#[doc(hidden)]
pub mod testsupport;
