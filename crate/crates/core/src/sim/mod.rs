//! Deterministic synthetic front-end: world generation, smooth trajectory
//! synthesis, IMU and feature-observation simulation, IMU-aided ground
//! feature prediction, and BEV homography RANSAC.

mod dataset;
mod imu;
mod observe;
mod ransac;
mod trajectory;
mod world;

pub use dataset::{
    read_dataset, read_groundtruth_file, write_dataset, CgTruthRecord, Dataset, DatasetError,
    GtRecord,
};
pub use imu::synthesize_imu;
pub use observe::{predict_feature, synthesize_observations, FeatureObs, FrameObservations};
pub use ransac::{homography_ransac, RansacResult, RigidTransform2};
pub use trajectory::{camera_extrinsics, generate_trajectory, nominal_r_bc, GtState, Trajectory};
pub use world::{generate_world, Landmark3d, LandmarkClass, WorldModel};
