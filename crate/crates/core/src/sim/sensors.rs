//! Generative sensor models: UWB ranges and body-frame IMU samples.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::orientation::{standard_normal3, GravityModel, ImuSample};
use crate::sim::obstacle::Obstacle;
use crate::sim::trajectory::Pose;

/// Ranges beyond this are outside the validated model.
pub const MAX_MODEL_RANGE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UwbConfig {
    /// Scale `a` of `d_raw = a d + b + n`.
    pub scale: f64,
    /// Offset `b`, m.
    pub offset: f64,
    pub sigma_los: f64,
    pub sigma_nlos: f64,
    /// Extra path length when the line of sight is blocked, m.
    pub nlos_bias: f64,
    /// Pairs that are always blocked (e.g. by the wearer's body).
    pub persistent_nlos: Vec<[u32; 2]>,
}

impl Default for UwbConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
            sigma_los: 0.116,
            sigma_nlos: 0.275,
            nlos_bias: 0.15,
            persistent_nlos: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeDraw {
    pub d_raw: f64,
    pub d_true: f64,
    pub nlos: bool,
    pub out_of_model: bool,
}

/// Error terms of one transaction, shared by both legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeError {
    pub noise: f64,
    pub bias: f64,
    pub nlos: bool,
}

/// Chooses the noise branch from the line of sight and draws the error.
pub fn draw_range_error<R: Rng + ?Sized>(
    pos_i: &Vec3,
    pos_j: &Vec3,
    obstacles: &[Obstacle],
    model: &UwbConfig,
    persistent_nlos: bool,
    rng: &mut R,
) -> RangeError {
    let mut blocked = persistent_nlos;
    let mut sigma = if persistent_nlos { model.sigma_nlos } else { model.sigma_los };
    let mut bias = if persistent_nlos { model.nlos_bias } else { 0.0 };
    for o in obstacles {
        if o.intersects_segment(pos_i, pos_j) {
            blocked = true;
            sigma = sigma.max(o.nlos_sigma);
            bias = bias.max(o.nlos_bias);
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    RangeError {
        noise: sigma * z,
        bias,
        nlos: blocked,
    }
}

/// One raw range `a d + b + bias + n` between two positions.
pub fn simulate_range<R: Rng + ?Sized>(
    pos_i: &Vec3,
    pos_j: &Vec3,
    obstacles: &[Obstacle],
    model: &UwbConfig,
    persistent_nlos: bool,
    rng: &mut R,
) -> RangeDraw {
    let d = (pos_j - pos_i).norm();
    let e = draw_range_error(pos_i, pos_j, obstacles, model, persistent_nlos, rng);
    RangeDraw {
        d_raw: model.scale * d + model.offset + e.bias + e.noise,
        d_true: d,
        nlos: e.nlos,
        out_of_model: d >= MAX_MODEL_RANGE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoise {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub mag_sigma: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_sigma: 0.05,
            gyro_sigma: 0.005,
            mag_sigma: 0.005,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
        }
    }
}

impl ImuNoise {
    pub fn noiseless() -> Self {
        Self {
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            mag_sigma: 0.0,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
        }
    }
}

/// Body-frame specific force, angular rate and magnetic field at a pose.
pub fn sample_imu<R: Rng + ?Sized>(
    pose: &Pose,
    t: f64,
    g: &GravityModel,
    mag_world: &Vec3,
    noise: &ImuNoise,
    rng: &mut R,
) -> ImuSample {
    let inv = pose.orientation.inverse();
    let mut accel = inv * (pose.acceleration + g.g) + Vec3::from(noise.accel_bias);
    let mut gyro = pose.angular_velocity + Vec3::from(noise.gyro_bias);
    let mut mag = inv * mag_world;
    if noise.accel_sigma > 0.0 {
        accel += standard_normal3(rng) * noise.accel_sigma;
    }
    if noise.gyro_sigma > 0.0 {
        gyro += standard_normal3(rng) * noise.gyro_sigma;
    }
    if noise.mag_sigma > 0.0 {
        mag += standard_normal3(rng) * noise.mag_sigma;
    }
    ImuSample {
        timestamp: t,
        accel,
        gyro,
        mag,
    }
}
