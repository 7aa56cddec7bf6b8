//! Monocular visual-inertial odometry with online calibration of the
//! camera-ground geometry (height plus a two-step rotation), evaluated on
//! deterministic synthetic datasets.

pub mod cg_init;
pub mod config;
pub mod estimator;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod imu_preint;
pub mod pipeline;
pub mod quat;
pub mod sim;
