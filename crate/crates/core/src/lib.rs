//! Anchor-free relative position tracking for small constellations of
//! UWB/IMU trackers.
//!
//! Each node dead-reckons from its own inertial estimates; pairwise UWB ranges
//! correct one small EKF per node pair, and a classical MDS step after every
//! ranging round pulls the pair filters back toward a geometrically consistent
//! layout.

pub mod calibration;
pub mod ekf;
pub mod eventlog;
pub mod frame;
pub mod math;
pub mod mds;
pub mod metrics;
pub mod orientation;
pub mod pipeline;
pub mod protocol;
pub mod sim;
