//! Extended Kalman filter over the relative state of one node pair.
//!
//! The state is the position and velocity of node j relative to node i in the
//! world frame. Prediction integrates the difference of the two nodes'
//! world-frame accelerations; correction uses the measured distance and a
//! low-pass filtered range rate, modelled as the norms of the position and
//! velocity blocks.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector};
use thiserror::Error;

use crate::math::{self, UnitQuat, Vec3};

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Vec6 = SVector<f64, 6>;
pub type Mat12 = SMatrix<f64, 12, 12>;

/// Norms below this make the corresponding measurement row undefined.
pub const DEGENERATE_NORM: f64 = 1e-6;
/// Longest single prediction step.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("prediction step {0} s must be in (0, {MAX_DT}]")]
    InvalidDt(f64),
    #[error("state is degenerate: {0}")]
    Degenerate(&'static str),
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairState {
    /// Position of j relative to i, world frame.
    pub x: Vec3,
    pub v: Vec3,
    /// Orientation of j relative to i.
    pub q: UnitQuat,
    /// Covariance over (x, v).
    pub p: Mat6,
    pub t: f64,
}

impl PairState {
    pub fn new(x: Vec3, v: Vec3, q: UnitQuat, p: Mat6, t: f64) -> Self {
        Self { x, v, q, p, t }
    }

    pub fn vector(&self) -> Vec6 {
        Vec6::new(self.x.x, self.x.y, self.x.z, self.v.x, self.v.y, self.v.z)
    }

    fn set_vector(&mut self, s: &Vec6) {
        self.x = Vec3::new(s[0], s[1], s[2]);
        self.v = Vec3::new(s[3], s[4], s[5]);
    }

    /// The same relation seen from node j.
    pub fn reversed(&self) -> Self {
        Self {
            x: -self.x,
            v: -self.v,
            q: self.q.inverse(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub a_i: Vec3,
    pub a_j: Vec3,
    pub q_i: UnitQuat,
    pub q_j: UnitQuat,
    pub dt: f64,
}

/// Input noise ordered as (a_i, a_j, q_i, q_j), 3 components each.
pub fn input_covariance(
    a_cov_i: &Matrix3<f64>,
    a_cov_j: &Matrix3<f64>,
    q_cov_i: &Matrix3<f64>,
    q_cov_j: &Matrix3<f64>,
) -> Mat12 {
    let mut s = Mat12::zeros();
    s.fixed_view_mut::<3, 3>(0, 0).copy_from(a_cov_i);
    s.fixed_view_mut::<3, 3>(3, 3).copy_from(a_cov_j);
    s.fixed_view_mut::<3, 3>(6, 6).copy_from(q_cov_i);
    s.fixed_view_mut::<3, 3>(9, 9).copy_from(q_cov_j);
    s
}

/// Constant-acceleration transition Jacobian.
pub fn transition_jacobian(dt: f64) -> Mat6 {
    let mut f = Mat6::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
    f
}

/// Derivative of the predicted (x, v) with respect to (a_i, a_j, q_i, q_j).
/// Accelerations are already world-frame, so the orientation columns are zero.
pub fn input_jacobian(dt: f64) -> SMatrix<f64, 6, 12> {
    let mut w = SMatrix::<f64, 6, 12>::zeros();
    let half = 0.5 * dt * dt;
    for k in 0..3 {
        w[(k, k)] = -half;
        w[(k, 3 + k)] = half;
        w[(3 + k, k)] = -dt;
        w[(3 + k, 3 + k)] = dt;
    }
    w
}

pub fn predict(state: &PairState, u: &ControlInput, sigma_u: &Mat12) -> Result<PairState, EkfError> {
    let dt = u.dt;
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(EkfError::InvalidDt(dt));
    }
    let da = u.a_j - u.a_i;
    let f = transition_jacobian(dt);
    let w = input_jacobian(dt);
    let q = w * sigma_u * w.transpose();
    Ok(PairState {
        x: state.x + state.v * dt + da * (0.5 * dt * dt),
        v: state.v + da * dt,
        q: math::quat_relative(&u.q_i, &u.q_j),
        p: math::symmetrize(&(f * state.p * f.transpose() + q)),
        t: state.t + dt,
    })
}

/// Predicted measurement `[‖x‖, ‖v‖]`.
pub fn measurement(state: &PairState) -> (f64, f64) {
    (state.x.norm(), state.v.norm())
}

/// Both Jacobian rows; fails if either norm is degenerate.
pub fn measurement_jacobian(state: &PairState) -> Result<SMatrix<f64, 2, 6>, EkfError> {
    let (rx, rv) = jacobian_rows(state);
    let rx = rx.ok_or(EkfError::Degenerate("relative position near zero"))?;
    let rv = rv.ok_or(EkfError::Degenerate("relative velocity near zero"))?;
    let mut h = SMatrix::<f64, 2, 6>::zeros();
    h.fixed_view_mut::<1, 6>(0, 0).copy_from(&rx);
    h.fixed_view_mut::<1, 6>(1, 0).copy_from(&rv);
    Ok(h)
}

type Row6 = SMatrix<f64, 1, 6>;

fn jacobian_rows(state: &PairState) -> (Option<Row6>, Option<Row6>) {
    let row = |u: &Vec3, offset: usize| {
        let n = u.norm();
        (n >= DEGENERATE_NORM).then(|| {
            let mut r = Row6::zeros();
            for k in 0..3 {
                r[offset + k] = u[k] / n;
            }
            r
        })
    };
    (row(&state.x, 0), row(&state.v, 3))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub d: f64,
    /// Range-rate magnitude; absent until the derivative filter has two samples.
    pub v: Option<f64>,
    /// Diagonal noise covariance for (d, v).
    pub r: Matrix2<f64>,
}

/// What the correction actually did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectionInfo {
    pub used_range: bool,
    pub used_rate: bool,
}

/// EKF update with the rows that are defined at the current state.
pub fn correct(state: &PairState, obs: &RangeObservation) -> Result<(PairState, CorrectionInfo), EkfError> {
    let (rx, rv) = jacobian_rows(state);
    let (d_hat, v_hat) = measurement(state);
    let rx = rx.filter(|_| obs.d.is_finite());
    let rv = rv.filter(|_| obs.v.is_some_and(f64::is_finite));
    let info = CorrectionInfo {
        used_range: rx.is_some(),
        used_rate: rv.is_some(),
    };
    let updated = match (rx, rv) {
        (Some(hx), Some(hv)) => {
            let mut h = SMatrix::<f64, 2, 6>::zeros();
            h.fixed_view_mut::<1, 6>(0, 0).copy_from(&hx);
            h.fixed_view_mut::<1, 6>(1, 0).copy_from(&hv);
            let y = nalgebra::Vector2::new(obs.d - d_hat, obs.v.unwrap_or(0.0) - v_hat);
            update(state, &h, &y, &obs.r)?
        }
        (Some(hx), None) => update(state, &hx, &SVector::<f64, 1>::new(obs.d - d_hat), &SMatrix::<f64, 1, 1>::new(obs.r[(0, 0)]))?,
        (None, Some(hv)) => update(
            state,
            &hv,
            &SVector::<f64, 1>::new(obs.v.unwrap_or(0.0) - v_hat),
            &SMatrix::<f64, 1, 1>::new(obs.r[(1, 1)]),
        )?,
        (None, None) => *state,
    };
    Ok((updated, info))
}

fn update<const M: usize>(
    state: &PairState,
    h: &SMatrix<f64, M, 6>,
    innovation: &SVector<f64, M>,
    r: &SMatrix<f64, M, M>,
) -> Result<PairState, EkfError> {
    let p = &state.p;
    let s = h * p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(EkfError::SingularInnovation)?;
    if s_inv.iter().any(|v| !v.is_finite()) {
        return Err(EkfError::SingularInnovation);
    }
    let k = p * h.transpose() * s_inv;
    let mut next = *state;
    next.set_vector(&(state.vector() + k * innovation));
    let i_kh = Mat6::identity() - k * h;
    next.p = math::symmetrize(&(i_kh * p * i_kh.transpose() + k * r * k.transpose()));
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub window: usize,
    pub threshold_scale: f64,
    /// Range noise used both for the threshold and the observation covariance.
    pub sigma_d: f64,
    pub cutoff_hz: f64,
    /// Rate variance is `velocity_variance_factor * sigma_d^2 * sample_rate`.
    pub velocity_variance_factor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 5,
            threshold_scale: 3.0,
            sigma_d: 0.116,
            cutoff_hz: 2.0,
            velocity_variance_factor: 4.0,
        }
    }
}

/// Gating needs this many samples in the window.
pub const GATE_MIN_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    Accepted(RangeObservation),
    Rejected { deviation: f64, threshold: f64 },
}

/// Running-average outlier gate and range-rate derivative filter for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierGate {
    pub config: GateConfig,
    window: VecDeque<(f64, f64)>,
    rate: Option<f64>,
}

impl OutlierGate {
    pub fn new(config: GateConfig) -> Self {
        Self {
            config,
            window: VecDeque::with_capacity(config.window + 1),
            rate: None,
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn filtered_rate(&self) -> Option<f64> {
        self.rate
    }

    pub fn gate_and_derive(&mut self, d_cal: f64, t: f64, last_v: f64) -> GateOutcome {
        let cfg = self.config;
        if self.window.len() >= GATE_MIN_SAMPLES {
            let mean = self.window.iter().map(|&(_, d)| d).sum::<f64>() / self.window.len() as f64;
            let span = t - self.window.front().map_or(t, |&(t0, _)| t0);
            let threshold = cfg.threshold_scale * (last_v.abs() * span + 3.0 * cfg.sigma_d);
            let deviation = (d_cal - mean).abs();
            if deviation > threshold || !d_cal.is_finite() {
                return GateOutcome::Rejected { deviation, threshold };
            }
        }
        let mut rate_variance = None;
        if let Some(&(t_prev, d_prev)) = self.window.back() {
            let dt = t - t_prev;
            if dt > 0.0 {
                let raw = (d_cal - d_prev) / dt;
                let beta = 1.0 - (-std::f64::consts::TAU * cfg.cutoff_hz * dt).exp();
                self.rate = Some(match self.rate {
                    Some(prev) => prev + beta * (raw - prev),
                    None => raw,
                });
                rate_variance = Some(cfg.velocity_variance_factor * cfg.sigma_d * cfg.sigma_d / dt);
            }
        }
        self.window.push_back((t, d_cal));
        while self.window.len() > cfg.window {
            self.window.pop_front();
        }
        let var_d = cfg.sigma_d * cfg.sigma_d;
        GateOutcome::Accepted(RangeObservation {
            d: d_cal.max(0.0),
            v: rate_variance.and(self.rate.map(f64::abs)),
            r: Matrix2::new(var_d, 0.0, 0.0, rate_variance.unwrap_or(var_d)),
        })
    }
}
