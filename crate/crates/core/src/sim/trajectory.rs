//! Ground-truth motion of simulated nodes.
//!
//! All analytic trajectories start at rest: the path parameter advances through
//! a C2 time warp that ramps the speed from zero over `ramp` seconds.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{UnitQuat, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("time {t} outside trajectory domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("cannot read trajectory file {path}: {message}")]
    File { path: String, message: String },
}

/// Kinematic state of one node in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    /// Body to world.
    pub orientation: UnitQuat,
    /// Angular rate in the body frame.
    pub angular_velocity: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodySite {
    RightUpperArm,
    RightWrist,
    RightHip,
    LeftWrist,
    RightKnee,
    LeftKnee,
}

/// Walking path shared by all body-worn trackers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyConfig {
    /// Ellipse center; z is the pelvis height.
    pub center: [f64; 3],
    pub radii: [f64; 2],
    pub lap_time: f64,
    pub ramp: f64,
    /// Length of one walk / jumping-jack / squat cycle.
    pub activity_period: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            center: [2.5, 1.5, 1.0],
            radii: [1.6, 0.9],
            lap_time: 24.0,
            ramp: 2.0,
            activity_period: 36.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryConfig {
    Static {
        position: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
    Circle {
        center: [f64; 3],
        radius: f64,
        speed: f64,
        #[serde(default)]
        phase_deg: f64,
        #[serde(default)]
        ramp: f64,
    },
    /// Closed uniform cubic B-spline through the control polygon.
    Spline {
        control_points: Vec<[f64; 3]>,
        lap_time: f64,
        /// Starting point as a fraction of one lap.
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        ramp: f64,
    },
    Body { site: BodySite },
    /// CSV with columns t, x, y, z; interpolated with a natural cubic spline.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Static { position: Vec3, yaw: f64 },
    Circle { center: Vec3, radius: f64, speed: f64, phase: f64, warp: TimeWarp },
    Spline { points: Vec<Vec3>, rate: f64, offset: f64, warp: TimeWarp },
    Body { site: BodySite, body: BodyConfig },
    File { t: Vec<f64>, axes: [CubicSpline; 3] },
}

/// Speed ramp `s(t)` with `s' = smootherstep(t / ramp)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWarp {
    pub ramp: f64,
}

impl TimeWarp {
    /// Returns `(s, s', s'')`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        if self.ramp <= 0.0 {
            return (t, 1.0, 0.0);
        }
        let r = self.ramp;
        let x = t / r;
        if x <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if x >= 1.0 {
            (0.5 * r + (t - r), 1.0, 0.0)
        } else {
            let s = r * (x.powi(6) - 3.0 * x.powi(5) + 2.5 * x.powi(4));
            let ds = 6.0 * x.powi(5) - 15.0 * x.powi(4) + 10.0 * x.powi(3);
            let dds = (30.0 * x.powi(4) - 60.0 * x.powi(3) + 30.0 * x * x) / r;
            (s, ds, dds)
        }
    }
}

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

fn yaw_quat(yaw: f64) -> UnitQuat {
    UnitQuat::from_axis_angle(&Vec3::z_axis(), yaw)
}

fn to_vec(p: &[f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

impl Trajectory {
    pub fn from_config(
        cfg: &TrajectoryConfig,
        body: Option<&BodyConfig>,
        base_dir: Option<&Path>,
    ) -> Result<Self, TrajectoryError> {
        let invalid = |m: &str| Err(TrajectoryError::Invalid(m.to_string()));
        match cfg {
            TrajectoryConfig::Static { position, yaw_deg } => Ok(Self::Static {
                position: to_vec(position),
                yaw: yaw_deg.to_radians(),
            }),
            TrajectoryConfig::Circle {
                center,
                radius,
                speed,
                phase_deg,
                ramp,
            } => {
                if !(*radius > 0.0) {
                    return invalid("radius must be positive");
                }
                if *ramp < 0.0 {
                    return invalid("ramp must be non-negative");
                }
                Ok(Self::Circle {
                    center: to_vec(center),
                    radius: *radius,
                    speed: *speed,
                    phase: phase_deg.to_radians(),
                    warp: TimeWarp { ramp: *ramp },
                })
            }
            TrajectoryConfig::Spline {
                control_points,
                lap_time,
                phase,
                ramp,
            } => {
                if control_points.len() < 4 {
                    return invalid("a closed spline needs at least 4 control points");
                }
                if !(*lap_time > 0.0) {
                    return invalid("lap_time must be positive");
                }
                if *ramp < 0.0 {
                    return invalid("ramp must be non-negative");
                }
                let m = control_points.len() as f64;
                Ok(Self::Spline {
                    points: control_points.iter().map(to_vec).collect(),
                    rate: m / lap_time,
                    offset: phase.rem_euclid(1.0) * m,
                    warp: TimeWarp { ramp: *ramp },
                })
            }
            TrajectoryConfig::Body { site } => {
                let body = body.cloned().unwrap_or_default();
                if !(body.lap_time > 0.0) || !(body.activity_period > 0.0) {
                    return invalid("body lap_time and activity_period must be positive");
                }
                Ok(Self::Body { site: *site, body })
            }
            TrajectoryConfig::File { path } => {
                let full = match base_dir {
                    Some(dir) => dir.join(path),
                    None => Path::new(path).to_path_buf(),
                };
                let text = std::fs::read_to_string(&full).map_err(|e| TrajectoryError::File {
                    path: full.display().to_string(),
                    message: e.to_string(),
                })?;
                Self::from_csv(&text).map_err(|e| TrajectoryError::File {
                    path: full.display().to_string(),
                    message: e.to_string(),
                })
            }
        }
    }

    /// Parses `t,x,y,z` rows; a non-numeric first line is treated as a header.
    pub fn from_csv(text: &str) -> Result<Self, TrajectoryError> {
        let mut t = Vec::new();
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            let values = match parsed {
                Ok(v) if v.len() == 4 => v,
                Err(_) if t.is_empty() && n == 0 => continue,
                _ => {
                    return Err(TrajectoryError::Invalid(format!(
                        "line {}: expected 4 numeric columns",
                        n + 1
                    )))
                }
            };
            if let Some(&last) = t.last() {
                if values[0] <= last {
                    return Err(TrajectoryError::Invalid(format!(
                        "line {}: timestamps must increase",
                        n + 1
                    )));
                }
            }
            t.push(values[0]);
            for k in 0..3 {
                cols[k].push(values[k + 1]);
            }
        }
        if t.len() < 2 {
            return Err(TrajectoryError::Invalid("need at least two samples".into()));
        }
        let axes = [
            CubicSpline::natural(&t, &cols[0]),
            CubicSpline::natural(&t, &cols[1]),
            CubicSpline::natural(&t, &cols[2]),
        ];
        Ok(Self::File { t, axes })
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::File { t, .. } => (t[0], t[t.len() - 1]),
            _ => (0.0, f64::INFINITY),
        }
    }

    pub fn pose(&self, t: f64) -> Result<Pose, TrajectoryError> {
        let (start, end) = self.domain();
        if !(t >= start - 1e-9 && t <= end + 1e-9) {
            return Err(TrajectoryError::OutOfDomain { t, start, end });
        }
        Ok(self.pose_unchecked(t.clamp(start, end)))
    }

    fn pose_unchecked(&self, t: f64) -> Pose {
        match self {
            Self::Static { position, yaw } => Pose {
                position: *position,
                velocity: Vec3::zeros(),
                acceleration: Vec3::zeros(),
                orientation: yaw_quat(*yaw),
                angular_velocity: Vec3::zeros(),
            },
            Self::Circle {
                center,
                radius,
                speed,
                phase,
                warp,
            } => {
                let (s, ds, dds) = warp.eval(t);
                let w = speed / radius;
                let th = phase + w * s;
                let th_d = w * ds;
                let th_dd = w * dds;
                let (sin, cos) = th.sin_cos();
                let radial = Vec3::new(cos, sin, 0.0);
                let tangent = Vec3::new(-sin, cos, 0.0);
                let heading = if *speed >= 0.0 { th + std::f64::consts::FRAC_PI_2 } else { th - std::f64::consts::FRAC_PI_2 };
                Pose {
                    position: center + radial * *radius,
                    velocity: tangent * (radius * th_d),
                    acceleration: tangent * (radius * th_dd) - radial * (radius * th_d * th_d),
                    orientation: yaw_quat(heading),
                    angular_velocity: Vec3::new(0.0, 0.0, th_d),
                }
            }
            Self::Spline {
                points,
                rate,
                offset,
                warp,
            } => {
                let (s, ds, dds) = warp.eval(t);
                let u = offset + rate * s;
                let (c, c1, c2) = bspline(points, u);
                let ud = rate * ds;
                let udd = rate * dds;
                let yaw = c1.y.atan2(c1.x);
                let planar = c1.x * c1.x + c1.y * c1.y;
                let yaw_rate = if planar > 1e-12 {
                    (c1.x * c2.y - c1.y * c2.x) / planar * ud
                } else {
                    0.0
                };
                Pose {
                    position: c,
                    velocity: c1 * ud,
                    acceleration: c2 * (ud * ud) + c1 * udd,
                    orientation: yaw_quat(yaw),
                    angular_velocity: Vec3::new(0.0, 0.0, yaw_rate),
                }
            }
            Self::Body { site, body } => {
                let p = |tt: f64| body_position(*site, body, tt);
                let h = 1e-3;
                let (pm2, pm1, p0, pp1, pp2) = (p(t - 2.0 * h), p(t - h), p(t), p(t + h), p(t + 2.0 * h));
                let vel = (pm2 - pm1 * 8.0 + pp1 * 8.0 - pp2) / (12.0 * h);
                let acc = (-pm2 + pm1 * 16.0 - p0 * 30.0 + pp1 * 16.0 - pp2) / (12.0 * h * h);
                let (yaw, yaw_rate) = body_heading(body, t);
                Pose {
                    position: p0,
                    velocity: vel,
                    acceleration: acc,
                    orientation: yaw_quat(yaw),
                    angular_velocity: Vec3::new(0.0, 0.0, yaw_rate),
                }
            }
            Self::File { axes, .. } => {
                let e: Vec<(f64, f64, f64)> = axes.iter().map(|s| s.eval(t)).collect();
                let velocity = Vec3::new(e[0].1, e[1].1, e[2].1);
                let acceleration = Vec3::new(e[0].2, e[1].2, e[2].2);
                let planar = velocity.x * velocity.x + velocity.y * velocity.y;
                let (yaw, yaw_rate) = if planar > 1e-12 {
                    (
                        velocity.y.atan2(velocity.x),
                        (velocity.x * acceleration.y - velocity.y * acceleration.x) / planar,
                    )
                } else {
                    (0.0, 0.0)
                };
                Pose {
                    position: Vec3::new(e[0].0, e[1].0, e[2].0),
                    velocity,
                    acceleration,
                    orientation: yaw_quat(yaw),
                    angular_velocity: Vec3::new(0.0, 0.0, yaw_rate),
                }
            }
        }
    }
}

/// Closed uniform cubic B-spline: value, first and second derivative in `u`.
fn bspline(points: &[Vec3], u: f64) -> (Vec3, Vec3, Vec3) {
    let m = points.len();
    let u = u.rem_euclid(m as f64);
    let seg = (u.floor() as usize).min(m - 1);
    let s = u - seg as f64;
    let p = |k: usize| points[(seg + k) % m];
    let s2 = s * s;
    let s3 = s2 * s;
    let b = [
        (1.0 - s).powi(3) / 6.0,
        (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
        (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
        s3 / 6.0,
    ];
    let b1 = [
        -0.5 * (1.0 - s).powi(2),
        1.5 * s2 - 2.0 * s,
        -1.5 * s2 + s + 0.5,
        0.5 * s2,
    ];
    let b2 = [1.0 - s, 3.0 * s - 2.0, -3.0 * s + 1.0, s];
    let mut out = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
    for k in 0..4 {
        out.0 += p(k) * b[k];
        out.1 += p(k) * b1[k];
        out.2 += p(k) * b2[k];
    }
    out
}

/// Antiderivative of `smootherstep`, zero below the step.
fn smootherstep_integral(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        x - 0.5
    } else {
        x.powi(4) * (x * (x - 3.0) + 2.5)
    }
}

/// Time spent walking up to `t`: the integral of the walking weight.
fn walking_time(body: &BodyConfig, t: f64) -> f64 {
    let (period, third, fade) = activity_layout(body);
    let ramp = |t: f64, edge: f64| fade * smootherstep_integral((t - edge + 0.5 * fade) / fade);
    // jumping jacks then squats fill the last two thirds of each cycle
    let still = |t: f64| -> f64 {
        let last = (t / period).floor().max(0.0) as i64;
        (-1..=last)
            .map(|c| {
                let base = c as f64 * period;
                ramp(t, base + third) - ramp(t, base + period)
            })
            .sum()
    };
    t - (still(t) - still(0.0))
}

fn body_root(body: &BodyConfig, t: f64) -> (Vec3, f64, f64) {
    let walked = walking_time(body, t);
    let (walk, _, _) = activity_weights(body, t);
    let (s, ds, _) = TimeWarp { ramp: body.ramp }.eval(walked);
    let w = TAU / body.lap_time;
    let th = w * s;
    let [a, b] = body.radii;
    let root = Vec3::new(body.center[0] + a * th.cos(), body.center[1] + b * th.sin(), body.center[2]);
    (root, th, w * ds * walk)
}

fn body_heading(body: &BodyConfig, t: f64) -> (f64, f64) {
    let (_, th, th_d) = body_root(body, t);
    let [a, b] = body.radii;
    let (sin, cos) = th.sin_cos();
    let yaw = (b * cos).atan2(-a * sin);
    let rate = a * b / (a * a * sin * sin + b * b * cos * cos) * th_d;
    (yaw, rate)
}

/// Weights of the walking, jumping-jack and squat phases at time `t`.
fn activity_weights(body: &BodyConfig, t: f64) -> (f64, f64, f64) {
    let (period, third, fade) = activity_layout(body);
    let window = |t: f64, start: f64, end: f64| {
        smootherstep((t - start + 0.5 * fade) / fade) - smootherstep((t - end + 0.5 * fade) / fade)
    };
    let cycle = (t / period).floor();
    let mut jj = 0.0;
    let mut squat = 0.0;
    for c in [cycle - 1.0, cycle] {
        let local = t - c * period;
        jj += window(local, third, 2.0 * third);
        squat += window(local, 2.0 * third, period);
    }
    (1.0 - jj - squat, jj, squat)
}

/// Cycle length, phase length and cross-fade time of the activity schedule.
fn activity_layout(body: &BodyConfig) -> (f64, f64, f64) {
    let period = body.activity_period;
    let third = period / 3.0;
    (period, third, 2.0_f64.min(third * 0.5))
}

fn body_position(site: BodySite, body: &BodyConfig, t: f64) -> Vec3 {
    let (root, _, _) = body_root(body, t);
    let (yaw, _) = body_heading(body, t);
    let envelope = smootherstep(t / body.ramp.max(1e-9));
    let (walk, jj, squat) = activity_weights(body, t);
    let gait = TAU * 0.9 * t;
    let jack = TAU * 1.0 * t;
    let dip = TAU * 0.4 * t;
    let raise = 0.5 * (1.0 - jack.cos());
    let bounce = 0.03 * (1.0 - (2.0 * jack).cos());
    let sink = 0.5 * (1.0 - dip.cos());

    // body frame: x forward, y left, z up, origin at the pelvis
    let (base, walk_d, jj_d, squat_d) = match site {
        BodySite::RightUpperArm => (
            Vec3::new(0.0, -0.20, 0.45),
            Vec3::new(0.08 * gait.sin(), 0.0, 0.0),
            Vec3::new(0.0, -0.10 * raise, 0.12 * raise + bounce),
            Vec3::new(0.05 * sink, 0.0, -0.40 * sink),
        ),
        BodySite::RightWrist => (
            Vec3::new(0.05, -0.25, 0.0),
            Vec3::new(0.25 * gait.sin(), 0.0, 0.05 * (1.0 - (2.0 * gait).cos()) * 0.5),
            Vec3::new(0.0, -0.45 * raise, 0.95 * raise + bounce),
            Vec3::new(0.35 * sink, 0.0, -0.30 * sink),
        ),
        BodySite::RightHip => (
            Vec3::new(0.0, -0.12, 0.0),
            Vec3::new(0.03 * gait.sin(), 0.0, 0.0),
            Vec3::new(0.0, 0.0, bounce),
            Vec3::new(-0.05 * sink, 0.0, -0.40 * sink),
        ),
        BodySite::LeftWrist => (
            Vec3::new(0.05, 0.25, 0.0),
            Vec3::new(-0.25 * gait.sin(), 0.0, 0.05 * (1.0 - (2.0 * gait).cos()) * 0.5),
            Vec3::new(0.0, 0.45 * raise, 0.95 * raise + bounce),
            Vec3::new(0.35 * sink, 0.0, -0.30 * sink),
        ),
        BodySite::RightKnee => (
            Vec3::new(0.05, -0.10, -0.50),
            Vec3::new(-0.20 * gait.sin(), 0.0, 0.03 * (1.0 - gait.cos())),
            Vec3::new(0.0, -0.15 * raise, bounce),
            Vec3::new(0.25 * sink, 0.0, -0.15 * sink),
        ),
        BodySite::LeftKnee => (
            Vec3::new(0.05, 0.10, -0.50),
            Vec3::new(0.20 * gait.sin(), 0.0, 0.03 * (1.0 + gait.cos())),
            Vec3::new(0.0, 0.15 * raise, bounce),
            Vec3::new(0.25 * sink, 0.0, -0.15 * sink),
        ),
    };
    let offset = base + (walk_d * walk + jj_d * jj + squat_d * squat) * envelope;
    root + yaw_quat(yaw) * offset
}

/// Natural cubic spline through `(t_k, y_k)`; constant extrapolation of the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas algorithm)
            let mut c_prime = vec![0.0; n];
            let mut d_prime = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                let a = h0;
                let b = 2.0 * (h0 + h1);
                let c = h1;
                let d = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
                let denom = b - a * c_prime[i - 1];
                c_prime[i] = c / denom;
                d_prime[i] = (d - a * d_prime[i - 1]) / denom;
            }
            for i in (1..n - 1).rev() {
                m[i] = d_prime[i] - c_prime[i] * m[i + 1];
            }
        }
        Self {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    /// Value, first and second derivative.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let n = self.t.len();
        let k = match self.t.partition_point(|&v| v <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        let a = (self.t[k + 1] - x) / h;
        let b = (x - self.t[k]) / h;
        let (m0, m1) = (self.m[k], self.m[k + 1]);
        let (y0, y1) = (self.y[k], self.y[k + 1]);
        let value = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let slope = (y1 - y0) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
        let curvature = a * m0 + b * m1;
        (value, slope, curvature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse_spline(lap: f64, ramp: f64) -> Trajectory {
        let control_points = (0..8)
            .map(|k| {
                let a = TAU * k as f64 / 8.0;
                [2.5 + 2.0 * a.cos(), 1.5 + 1.2 * a.sin(), 0.0]
            })
            .collect();
        Trajectory::from_config(
            &TrajectoryConfig::Spline {
                control_points,
                lap_time: lap,
                phase: 0.0,
                ramp,
            },
            None,
            None,
        )
        .unwrap()
    }

    fn check_derivatives(tr: &Trajectory, times: &[f64], tol_v: f64, tol_a: f64) {
        let h = 1e-4;
        for &t in times {
            let p = tr.pose(t).unwrap();
            let pm = tr.pose(t - h).unwrap();
            let pp = tr.pose(t + h).unwrap();
            let v_fd = (pp.position - pm.position) / (2.0 * h);
            let a_fd = (pp.velocity - pm.velocity) / (2.0 * h);
            assert!((v_fd - p.velocity).norm() < tol_v, "velocity at {t}: {v_fd} vs {}", p.velocity);
            assert!((a_fd - p.acceleration).norm() < tol_a, "acceleration at {t}");
            let yaw_fd = (pm.orientation.inverse() * pp.orientation).scaled_axis() / (2.0 * h);
            assert!((yaw_fd - p.angular_velocity).norm() < tol_a, "yaw rate at {t}");
        }
    }

    #[test]
    fn time_warp_is_smooth_at_ramp_end() {
        let w = TimeWarp { ramp: 2.0 };
        let (s0, d0, dd0) = w.eval(2.0 - 1e-9);
        let (s1, d1, dd1) = w.eval(2.0 + 1e-9);
        assert!((s0 - s1).abs() < 1e-8 && (d0 - d1).abs() < 1e-8 && (dd0 - dd1).abs() < 1e-6);
        assert_eq!(w.eval(0.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn spline_derivatives_match_finite_differences() {
        let tr = ellipse_spline(10.0, 2.0);
        check_derivatives(&tr, &[0.5, 1.3, 2.0, 3.7, 9.99, 25.2], 1e-6, 1e-5);
    }

    #[test]
    fn spline_starts_at_rest_and_is_planar() {
        let tr = ellipse_spline(10.0, 2.0);
        let p = tr.pose(0.0).unwrap();
        assert_eq!(p.velocity, Vec3::zeros());
        for k in 0..200 {
            let p = tr.pose(k as f64 * 0.37).unwrap();
            assert_eq!(p.position.z, 0.0);
        }
    }

    #[test]
    fn spline_is_periodic() {
        let tr = ellipse_spline(10.0, 0.0);
        let a = tr.pose(3.0).unwrap();
        let b = tr.pose(13.0).unwrap();
        assert!((a.position - b.position).norm() < 1e-9);
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let tr = Trajectory::from_config(
            &TrajectoryConfig::Circle {
                center: [0.0, 0.0, 0.0],
                radius: 2.0,
                speed: 1.5,
                phase_deg: 0.0,
                ramp: 0.0,
            },
            None,
            None,
        )
        .unwrap();
        for k in 0..50 {
            let p = tr.pose(k as f64 * 0.21).unwrap();
            assert!((p.acceleration.norm() - 1.5 * 1.5 / 2.0).abs() < 1e-12);
            assert!((p.velocity.norm() - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn body_sites_are_smooth_and_bounded() {
        for site in [
            BodySite::RightUpperArm,
            BodySite::RightWrist,
            BodySite::RightHip,
            BodySite::LeftWrist,
            BodySite::RightKnee,
            BodySite::LeftKnee,
        ] {
            let tr = Trajectory::from_config(&TrajectoryConfig::Body { site }, None, None).unwrap();
            check_derivatives(&tr, &[0.7, 5.0, 13.0, 24.5, 30.0, 40.0], 1e-5, 1e-3);
            for k in 0..400 {
                let p = tr.pose(k as f64 * 0.3).unwrap();
                assert!(p.velocity.norm() < 6.0);
                assert!(p.position.z > -0.1 && p.position.z < 2.5);
            }
        }
    }

    #[test]
    fn activity_weights_partition_unity() {
        let body = BodyConfig::default();
        for k in 0..1000 {
            let (w, j, s) = activity_weights(&body, k as f64 * 0.1);
            assert!(w >= -1e-12 && j >= -1e-12 && s >= -1e-12);
            assert!((w + j + s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn walking_time_integrates_walk_weight() {
        let body = BodyConfig::default();
        let h = 0.01;
        let mut integral = 0.0;
        for k in 0..12000 {
            let t = k as f64 * h;
            let expected = walking_time(&body, t);
            assert!((integral - expected).abs() < 1e-3, "t={t}: {integral} vs {expected}");
            let (w0, _, _) = activity_weights(&body, t);
            let (w1, _, _) = activity_weights(&body, t + h);
            integral += 0.5 * (w0 + w1) * h;
        }
    }

    #[test]
    fn csv_trajectory_interpolates_knots() {
        let csv = "t,x,y,z\n0,0,0,0\n1,1,0,0\n2,2,1,0\n3,2,2,0\n";
        let tr = Trajectory::from_csv(csv).unwrap();
        assert_eq!(tr.domain(), (0.0, 3.0));
        let p = tr.pose(2.0).unwrap();
        assert!((p.position - Vec3::new(2.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(matches!(tr.pose(3.5), Err(TrajectoryError::OutOfDomain { .. })));
        assert!(Trajectory::from_csv("0,0,0,0\n0,1,1,1\n").is_err());
    }

    #[test]
    fn natural_spline_reproduces_line() {
        let t = [0.0, 0.5, 1.5, 2.0];
        let y: Vec<f64> = t.iter().map(|v| 3.0 * v - 1.0).collect();
        let s = CubicSpline::natural(&t, &y);
        for k in 0..20 {
            let x = k as f64 * 0.1;
            let (v, d, c) = s.eval(x);
            assert!((v - (3.0 * x - 1.0)).abs() < 1e-12);
            assert!((d - 3.0).abs() < 1e-12);
            assert!(c.abs() < 1e-12);
        }
    }
}
