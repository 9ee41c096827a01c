//! Per-node local state estimation.
//!
//! Each node reports an absolute orientation `q_hat` (body to world) and a
//! gravity-compensated world-frame acceleration `a_hat`, both with constant
//! diagonal covariances. Two producers exist:
//!
//! * [`OrientationFilter`], a complementary quaternion filter (gyro prediction,
//!   accelerometer tilt and magnetometer heading correction with fixed gains);
//! * [`simulate_local_estimate`], which draws `q_hat` and `a_hat` directly from the
//!   additive Gaussian sensor model around the true values.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, quat_compose, quat_from_rotation_vector, UnitQuat, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrientationError {
    #[error("sample timestamp {got} is not after the previous sample at {previous}")]
    NonMonotonicTimestamp { previous: f64, got: f64 },
    #[error("{which} covariance is not positive semi-definite")]
    NotPsd { which: &'static str },
    #[error("gravity magnitude {0} m/s^2 outside [9.7, 9.9]")]
    InvalidGravity(f64),
}

/// Raw body-frame inertial and magnetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force, m/s^2.
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
    /// Magnetic field, gauss.
    pub mag: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalEstimate {
    pub timestamp: f64,
    /// Body-to-world orientation.
    pub q_hat: UnitQuat,
    /// World-frame linear acceleration with gravity removed, m/s^2.
    pub a_hat: Vec3,
    /// Orientation noise covariance (tangent space), rad^2.
    pub q_cov: Matrix3<f64>,
    /// Acceleration noise covariance, (m/s^2)^2.
    pub a_cov: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityModel {
    /// Reaction to gravity in the world frame; a level device at rest reads this.
    pub g: Vec3,
}

impl Default for GravityModel {
    fn default() -> Self {
        Self {
            g: Vec3::new(0.0, 0.0, 9.81),
        }
    }
}

impl GravityModel {
    pub fn new(g: Vec3) -> Result<Self, OrientationError> {
        let norm = g.norm();
        if !(9.7..=9.9).contains(&norm) {
            return Err(OrientationError::InvalidGravity(norm));
        }
        Ok(Self { g })
    }

    /// What an accelerometer at rest with attitude `q` measures.
    pub fn body_frame(&self, q: &UnitQuat) -> Vec3 {
        q.inverse() * self.g
    }
}

/// Default orientation noise: one degree standard deviation per axis.
pub fn default_q_cov() -> Matrix3<f64> {
    Matrix3::identity() * 1.0f64.to_radians().powi(2)
}

/// Default acceleration noise: 0.05 m/s^2 standard deviation per axis.
pub fn default_a_cov() -> Matrix3<f64> {
    Matrix3::identity() * 0.05f64.powi(2)
}

/// World-frame linear acceleration from a raw specific-force reading.
pub fn gravity_compensate(q_hat: &UnitQuat, raw_accel: &Vec3, g: &GravityModel) -> Vec3 {
    q_hat * raw_accel - g.g
}

/// Draws one noisy local estimate around the true orientation and acceleration.
///
/// Orientation noise is a rotation vector drawn from `N(0, q_cov)` composed onto
/// `true_q` (right-multiplied, i.e. expressed in the body frame).
pub fn simulate_local_estimate<R: Rng + ?Sized>(
    timestamp: f64,
    true_q: &UnitQuat,
    true_a_world: &Vec3,
    q_cov: &Matrix3<f64>,
    a_cov: &Matrix3<f64>,
    rng: &mut R,
) -> Result<LocalEstimate, OrientationError> {
    let q_factor = psd_factor(q_cov).ok_or(OrientationError::NotPsd { which: "orientation" })?;
    let a_factor = psd_factor(a_cov).ok_or(OrientationError::NotPsd { which: "acceleration" })?;
    let dq = q_factor * standard_normal3(rng);
    let da = a_factor * standard_normal3(rng);
    Ok(LocalEstimate {
        timestamp,
        q_hat: quat_compose(true_q, &quat_from_rotation_vector(&dq)),
        a_hat: true_a_world + da,
        q_cov: *q_cov,
        a_cov: *a_cov,
    })
}

pub(crate) fn standard_normal3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Returns `L` with `L L^T = cov`, or `None` when `cov` is not symmetric PSD.
pub(crate) fn psd_factor(cov: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let off_diagonal = (cov - Matrix3::from_diagonal(&cov.diagonal())).amax();
    if off_diagonal == 0.0 {
        if cov.diagonal().iter().any(|&v| v < 0.0) {
            return None;
        }
        return Some(Matrix3::from_diagonal(&cov.diagonal().map(f64::sqrt)));
    }
    let dynamic = math::Matrix::from_column_slice(3, 3, cov.as_slice());
    let eig = math::symmetric_eigen(&dynamic).ok()?;
    let scale = cov.amax().max(1e-300);
    if eig.values.iter().any(|&l| l < -1e-12 * scale) {
        return None;
    }
    let mut out = Matrix3::zeros();
    for (k, &l) in eig.values.iter().enumerate() {
        let col = eig.vectors.column(k);
        let s = l.max(0.0).sqrt();
        for r in 0..3 {
            out[(r, k)] = col[r] * s;
        }
    }
    Some(out)
}

/// Fixed correction gains, 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationGains {
    pub accel: f64,
    pub mag: f64,
}

impl Default for OrientationGains {
    fn default() -> Self {
        Self { accel: 2.5, mag: 2.5 }
    }
}

/// Complementary quaternion filter.
#[derive(Debug, Clone)]
pub struct OrientationFilter {
    q: UnitQuat,
    last_timestamp: Option<f64>,
    initialized: bool,
    gains: OrientationGains,
    gravity: GravityModel,
    /// World-frame magnetic field.
    mag_reference: Vec3,
    q_cov: Matrix3<f64>,
    a_cov: Matrix3<f64>,
}

impl OrientationFilter {
    /// A filter that initializes its attitude from the first sample it sees.
    pub fn new(gravity: GravityModel, mag_reference: Vec3) -> Self {
        Self {
            q: UnitQuat::identity(),
            last_timestamp: None,
            initialized: false,
            gains: OrientationGains::default(),
            gravity,
            mag_reference,
            q_cov: default_q_cov(),
            a_cov: default_a_cov(),
        }
    }

    /// A filter starting from an explicit attitude guess.
    pub fn with_initial(q: UnitQuat, gravity: GravityModel, mag_reference: Vec3) -> Self {
        Self {
            q,
            initialized: true,
            ..Self::new(gravity, mag_reference)
        }
    }

    pub fn with_gains(mut self, gains: OrientationGains) -> Self {
        self.gains = gains;
        self
    }

    pub fn with_covariances(mut self, q_cov: Matrix3<f64>, a_cov: Matrix3<f64>) -> Self {
        self.q_cov = q_cov;
        self.a_cov = a_cov;
        self
    }

    pub fn attitude(&self) -> UnitQuat {
        self.q
    }

    pub fn update(&mut self, sample: &ImuSample) -> Result<LocalEstimate, OrientationError> {
        if let Some(prev) = self.last_timestamp {
            if sample.timestamp <= prev {
                return Err(OrientationError::NonMonotonicTimestamp {
                    previous: prev,
                    got: sample.timestamp,
                });
            }
            let dt = sample.timestamp - prev;
            self.q = math::renormalize(self.q * quat_from_rotation_vector(&(sample.gyro * dt)));
            self.correct_tilt(&sample.accel, dt);
            self.correct_heading(&sample.mag, dt);
        } else if !self.initialized {
            if let Some(q) = attitude_from_vectors(&sample.accel, &sample.mag, &self.mag_reference) {
                self.q = q;
            }
            self.initialized = true;
        }
        self.last_timestamp = Some(sample.timestamp);
        Ok(LocalEstimate {
            timestamp: sample.timestamp,
            q_hat: self.q,
            a_hat: gravity_compensate(&self.q, &sample.accel, &self.gravity),
            q_cov: self.q_cov,
            a_cov: self.a_cov,
        })
    }

    fn correct_tilt(&mut self, accel: &Vec3, dt: f64) {
        let norm = accel.norm();
        if norm < 1e-6 {
            return;
        }
        let up_meas = self.q * (accel / norm);
        let up_ref = self.gravity.g.normalize();
        let axis = up_meas.cross(&up_ref);
        let sin = axis.norm();
        if sin < 1e-12 {
            return;
        }
        let angle = sin.atan2(up_meas.dot(&up_ref));
        let step = (self.gains.accel * dt).min(1.0) * angle;
        let correction = quat_from_rotation_vector(&(axis / sin * step));
        self.q = math::renormalize(correction * self.q);
    }

    fn correct_heading(&mut self, mag: &Vec3, dt: f64) {
        if mag.norm() < 1e-9 {
            return;
        }
        let m_world = self.q * mag;
        let measured = m_world.y.atan2(m_world.x);
        let reference = self.mag_reference.y.atan2(self.mag_reference.x);
        if m_world.xy().norm() < 1e-9 {
            return;
        }
        let err = wrap_angle(measured - reference);
        let step = (self.gains.mag * dt).min(1.0) * err;
        let up = self.gravity.g.normalize();
        let correction = quat_from_rotation_vector(&(-up * step));
        self.q = math::renormalize(correction * self.q);
    }
}

/// Attitude from one accelerometer and magnetometer reading (TRIAD).
pub fn attitude_from_vectors(accel: &Vec3, mag: &Vec3, mag_reference: &Vec3) -> Option<UnitQuat> {
    let z_b = accel.try_normalize(1e-9)?;
    let m_h = mag - z_b * mag.dot(&z_b);
    let x_b = m_h.try_normalize(1e-9)?;
    let y_b = z_b.cross(&x_b);
    // rows: world-aligned axes expressed in the body frame
    let r = Matrix3::from_rows(&[x_b.transpose(), y_b.transpose(), z_b.transpose()]);
    let to_mag_frame = UnitQuat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let heading = mag_reference.y.atan2(mag_reference.x);
    Some(UnitQuat::from_axis_angle(&Vec3::z_axis(), heading) * to_mag_frame)
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}
