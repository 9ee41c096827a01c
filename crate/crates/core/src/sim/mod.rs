//! Simulated world: trajectories, sensors, obstacles and the ranging network.

pub mod bench;
pub mod config;
pub mod network;
pub mod obstacle;
pub mod run;
pub mod sensors;
pub mod trajectory;
