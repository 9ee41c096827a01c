//! Resolving the world frame of a freshly initialized constellation.
//!
//! Classical MDS recovers the layout only up to rotation and reflection, while
//! the pair filters predict with world-frame accelerations. Over a short window
//! each node's world-frame displacement is known from dead reckoning up to its
//! initial position and velocity, so the ranges
//!
//! `d_ij(t) = |p_j - p_i + (u_j - u_i) t + D_j(t) - D_i(t)|`
//!
//! pin down those unknowns in the world frame as soon as the motion is rich
//! enough. The fit is a small robust Gauss-Newton problem started from rotated
//! and mirrored copies of the MDS layout.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::Mat6;
use crate::math::{UnitQuat, Vec3};
use crate::protocol::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub enabled: bool,
    /// Length of the data window, s.
    pub window: f64,
    /// Ranges kept per fit; longer windows are subsampled evenly.
    pub max_ranges: usize,
    /// A competing solution this much worse (cost ratio) still counts as ambiguous.
    pub ambiguity_ratio: f64,
    /// Competing solutions closer than this (RMS over pairs, m) are the same solution.
    pub distinct_rms: f64,
    /// Fits with a normalized cost above this are not trusted.
    pub max_cost: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 3.0,
            max_ranges: 600,
            ambiguity_ratio: 1.5,
            distinct_rms: 0.3,
            max_cost: 9.0,
        }
    }
}

/// Dead-reckoned displacement of one node under zero-order-hold acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Kinematics {
    t: f64,
    a: Vec3,
    d: Vec3,
    v: Vec3,
}

impl Kinematics {
    fn advance(&mut self, t: f64) {
        let dt = t - self.t;
        if dt > 0.0 {
            self.d += self.v * dt + self.a * (0.5 * dt * dt);
            self.v += self.a * dt;
            self.t = t;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RangeSample {
    i: usize,
    j: usize,
    tau: f64,
    /// `D_j - D_i` at the sample time.
    dd: Vec3,
    d: f64,
    sigma: f64,
}

/// World-frame relative states at the end of a resolved window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSolution {
    pub t: f64,
    /// Relative position and velocity with their covariance, per pair.
    pub pairs: BTreeMap<(NodeId, NodeId), (Vec3, Vec3, Mat6)>,
    /// Mean squared normalized residual of the fit.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    Resolved(FrameSolution),
    /// Motion too poor (or data too inconsistent) to tell the candidate frames apart.
    Ambiguous,
}

/// Data collected since the constellation was initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    t0: f64,
    nodes: Vec<NodeId>,
    start: Vec<Vec3>,
    kin: Vec<Kinematics>,
    samples: Vec<RangeSample>,
}

impl FrameWindow {
    /// `layout` gives the MDS-frame positions at `t0` for every node.
    pub fn new(t0: f64, layout: &BTreeMap<NodeId, Vec3>, accel: &BTreeMap<NodeId, Vec3>) -> Self {
        let nodes: Vec<NodeId> = layout.keys().copied().collect();
        Self {
            t0,
            start: nodes.iter().map(|id| layout[id]).collect(),
            kin: nodes
                .iter()
                .map(|id| Kinematics {
                    t: t0,
                    a: accel.get(id).copied().unwrap_or_else(Vec3::zeros),
                    d: Vec3::zeros(),
                    v: Vec3::zeros(),
                })
                .collect(),
            nodes,
            samples: Vec::new(),
        }
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn index(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search(&id).ok()
    }

    /// A new world-frame acceleration of `node`, effective from `t`.
    pub fn on_accel(&mut self, node: NodeId, t: f64, a: Vec3) {
        if let Some(k) = self.index(node) {
            self.kin[k].advance(t);
            self.kin[k].a = a;
        }
    }

    pub fn on_range(&mut self, i: NodeId, j: NodeId, t: f64, d: f64, sigma: f64) {
        let (Some(a), Some(b)) = (self.index(i), self.index(j)) else {
            return;
        };
        if t < self.t0 {
            return;
        }
        self.kin[a].advance(t);
        self.kin[b].advance(t);
        self.samples.push(RangeSample {
            i: a,
            j: b,
            tau: t - self.t0,
            dd: self.kin[b].d - self.kin[a].d,
            d,
            sigma,
        });
    }

    /// Fits the window and evaluates the relative states at `t`.
    pub fn solve(&self, t: f64, planar: bool, cfg: &FrameConfig) -> FrameOutcome {
        let n = self.nodes.len();
        if n < 3 || self.samples.len() < 4 * n {
            return FrameOutcome::Ambiguous;
        }
        let dim = if planar { 2 } else { 3 };
        let stride = self.samples.len().div_ceil(cfg.max_ranges.max(1));
        let samples: Vec<RangeSample> = self.samples.iter().step_by(stride).copied().collect();

        let base: Vec<Vec3> = self.start.iter().map(|p| p - self.start[0]).collect();
        let mut fits: Vec<(f64, DVector<f64>)> = Vec::new();
        for r in start_rotations(planar) {
            let mut theta = DVector::zeros(2 * dim * (n - 1));
            for k in 1..n {
                let p = r * base[k];
                for c in 0..dim {
                    theta[param(k, c, dim, n, false)] = p[c];
                }
            }
            let theta = gauss_newton(&samples, theta, dim, n, 8);
            fits.push((cost(&samples, &theta, dim, n), theta));
        }
        // polish the most promising candidates
        fits.sort_by(|a, b| a.0.total_cmp(&b.0));
        fits.truncate(6);
        for f in &mut fits {
            f.1 = gauss_newton(&samples, f.1.clone(), dim, n, 30);
            f.0 = cost(&samples, &f.1, dim, n);
        }
        fits.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (best_cost, best) = &fits[0];
        if !best_cost.is_finite() || *best_cost > cfg.max_cost {
            return FrameOutcome::Ambiguous;
        }
        let tau = t - self.t0;
        let end = |theta: &DVector<f64>| self.relative_at(theta, tau, dim);
        let best_end = end(best);
        for (c, theta) in &fits[1..] {
            let other = end(theta);
            let rms = (best_end
                .iter()
                .zip(&other)
                .map(|((x, _), (y, _))| (x - y).norm_squared())
                .sum::<f64>()
                / best_end.len() as f64)
                .sqrt();
            if rms > cfg.distinct_rms && *c < cfg.ambiguity_ratio * best_cost.max(1e-12) {
                return FrameOutcome::Ambiguous;
            }
        }

        let cov = covariance(&samples, best, dim, n, *best_cost);
        let mut pairs = BTreeMap::new();
        for a in 0..n {
            for b in a + 1..n {
                let (x, v) = self.pair_state(best, tau, a, b, dim);
                let p = pair_covariance(&cov, a, b, tau, dim, n);
                pairs.insert((self.nodes[a], self.nodes[b]), (x, v, p));
            }
        }
        FrameOutcome::Resolved(FrameSolution {
            t,
            pairs,
            cost: *best_cost,
        })
    }

    fn pair_state(&self, theta: &DVector<f64>, tau: f64, a: usize, b: usize, dim: usize) -> (Vec3, Vec3) {
        let n = self.nodes.len();
        let (pa, ua) = node_params(theta, a, dim, n);
        let (pb, ub) = node_params(theta, b, dim, n);
        let mut ka = self.kin[a];
        let mut kb = self.kin[b];
        ka.advance(self.t0 + tau);
        kb.advance(self.t0 + tau);
        let x = pb - pa + (ub - ua) * tau + kb.d - ka.d;
        let v = ub - ua + kb.v - ka.v;
        (x, v)
    }

    fn relative_at(&self, theta: &DVector<f64>, tau: f64, dim: usize) -> Vec<(Vec3, Vec3)> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                out.push(self.pair_state(theta, tau, a, b, dim));
            }
        }
        out
    }
}

/// Index of a coordinate in the parameter vector; node 0 is the fixed gauge.
fn param(node: usize, c: usize, dim: usize, n: usize, velocity: bool) -> usize {
    let base = if velocity { dim * (n - 1) } else { 0 };
    base + (node - 1) * dim + c
}

fn node_params(theta: &DVector<f64>, node: usize, dim: usize, n: usize) -> (Vec3, Vec3) {
    let mut p = Vec3::zeros();
    let mut u = Vec3::zeros();
    if node > 0 {
        for c in 0..dim {
            p[c] = theta[param(node, c, dim, n, false)];
            u[c] = theta[param(node, c, dim, n, true)];
        }
    }
    (p, u)
}

fn relative(theta: &DVector<f64>, s: &RangeSample, dim: usize, n: usize) -> Vec3 {
    let (pi, ui) = node_params(theta, s.i, dim, n);
    let (pj, uj) = node_params(theta, s.j, dim, n);
    pj - pi + (uj - ui) * s.tau + s.dd
}

/// Huber weight on a normalized residual.
fn huber(z: f64) -> f64 {
    const K: f64 = 2.5;
    if z.abs() <= K {
        1.0
    } else {
        K / z.abs()
    }
}

fn cost(samples: &[RangeSample], theta: &DVector<f64>, dim: usize, n: usize) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let z = (s.d - relative(theta, s, dim, n).norm()) / s.sigma;
            // Huber loss, scaled so it equals z^2 in the quadratic zone
            let k = 2.5;
            if z.abs() <= k {
                z * z
            } else {
                2.0 * k * z.abs() - k * k
            }
        })
        .sum();
    total / samples.len() as f64
}

/// Normal matrix and gradient of the weighted problem.
fn normal_equations(
    samples: &[RangeSample],
    theta: &DVector<f64>,
    dim: usize,
    n: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = theta.len();
    let mut h = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(4 * dim);
    for s in samples {
        let r = relative(theta, s, dim, n);
        let norm = r.norm();
        if norm < 1e-9 {
            continue;
        }
        let u = r / norm;
        let z = (s.d - norm) / s.sigma;
        let w = huber(z) / (s.sigma * s.sigma);
        row.clear();
        for c in 0..dim {
            if s.j > 0 {
                row.push((param(s.j, c, dim, n, false), u[c]));
                row.push((param(s.j, c, dim, n, true), u[c] * s.tau));
            }
            if s.i > 0 {
                row.push((param(s.i, c, dim, n, false), -u[c]));
                row.push((param(s.i, c, dim, n, true), -u[c] * s.tau));
            }
        }
        let e = s.d - norm;
        for &(a, ja) in &row {
            g[a] += w * ja * e;
            for &(b, jb) in &row {
                h[(a, b)] += w * ja * jb;
            }
        }
    }
    (h, g)
}

fn gauss_newton(samples: &[RangeSample], mut theta: DVector<f64>, dim: usize, n: usize, iterations: usize) -> DVector<f64> {
    let mut current = cost(samples, &theta, dim, n);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let (h, g) = normal_equations(samples, &theta, dim, n);
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lambda * (h[(k, k)] + 1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &theta + &step;
            let c = cost(samples, &candidate, dim, n);
            if c < current {
                let done = current - c < 1e-10 * current.max(1e-12);
                theta = candidate;
                current = c;
                lambda = (lambda * 0.3).max(1e-9);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    theta
}

/// Parameter covariance, scaled by the achieved normalized cost when it exceeds one.
fn covariance(samples: &[RangeSample], theta: &DVector<f64>, dim: usize, n: usize, cost: f64) -> DMatrix<f64> {
    let (h, _) = normal_equations(samples, theta, dim, n);
    let m = h.nrows();
    let inv = h
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| DMatrix::identity(m, m));
    inv * cost.max(1.0)
}

/// Covariance of (x_ab, v_ab) at `tau` from the parameter covariance. The
/// dead-reckoned terms are treated as exact.
fn pair_covariance(cov: &DMatrix<f64>, a: usize, b: usize, tau: f64, dim: usize, n: usize) -> Mat6 {
    let m = cov.nrows();
    let mut jac = DMatrix::zeros(6, m);
    for c in 0..dim {
        for (node, sign) in [(b, 1.0), (a, -1.0)] {
            if node == 0 {
                continue;
            }
            jac[(c, param(node, c, dim, n, false))] += sign;
            jac[(c, param(node, c, dim, n, true))] += sign * tau;
            jac[(3 + c, param(node, c, dim, n, true))] += sign;
        }
    }
    let p = &jac * cov * jac.transpose();
    let mut out = Mat6::zeros();
    for r in 0..6 {
        for c in 0..6 {
            out[(r, c)] = p[(r, c)];
        }
    }
    // keep the filters receptive to the ranges that follow
    for k in 0..3 {
        out[(k, k)] = out[(k, k)].max(1e-3);
        out[(3 + k, 3 + k)] = out[(3 + k, 3 + k)].max(1e-3);
    }
    if planar_axis_unused(dim) {
        out[(2, 2)] = 1e-3;
        out[(5, 5)] = 1e-3;
    }
    out
}

fn planar_axis_unused(dim: usize) -> bool {
    dim == 2
}

/// Starting orientations: yaw steps in the plane, a quasi-uniform set in 3D,
/// each also mirrored.
fn start_rotations(planar: bool) -> Vec<nalgebra::Matrix3<f64>> {
    let mirror = nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
    let proper: Vec<nalgebra::Matrix3<f64>> = if planar {
        (0..12)
            .map(|k| {
                UnitQuat::from_axis_angle(&Vec3::z_axis(), std::f64::consts::TAU * k as f64 / 12.0)
                    .to_rotation_matrix()
                    .into_inner()
            })
            .collect()
    } else {
        (0..48).map(|k| halton_rotation(k + 1)).collect()
    };
    let mut out = proper.clone();
    out.extend(proper.iter().map(|r| r * mirror));
    out
}

fn radical_inverse(mut k: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    out
}

/// Uniform rotation from a low-discrepancy point (Shoemake's method).
fn halton_rotation(k: usize) -> nalgebra::Matrix3<f64> {
    let (u1, u2, u3) = (radical_inverse(k, 2), radical_inverse(k, 3), radical_inverse(k, 5));
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (t2, t3) = (std::f64::consts::TAU * u2, std::f64::consts::TAU * u3);
    let q = nalgebra::Quaternion::new(b * t3.cos(), a * t2.sin(), a * t2.cos(), b * t3.sin());
    UnitQuat::from_quaternion(q).to_rotation_matrix().into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nodes on circles with different rates; returns position and acceleration.
    fn motion(k: usize, t: f64) -> (Vec3, Vec3) {
        let c = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.5, 0.3, 0.0), Vec3::new(0.8, 2.2, 0.0), Vec3::new(2.0, 2.0, 0.0)][k];
        let (r, w) = [(0.6, 1.1), (0.5, -1.4), (0.7, 0.9), (0.4, 1.7)][k];
        let phase = k as f64;
        let a = w * t + phase;
        let p = c + Vec3::new(r * a.cos(), r * a.sin(), 0.0);
        let acc = Vec3::new(-r * w * w * a.cos(), -r * w * w * a.sin(), 0.0);
        (p, acc)
    }

    fn window_for(n: usize, rotation: nalgebra::Matrix3<f64>, duration: f64) -> (FrameWindow, f64) {
        let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        let layout: BTreeMap<NodeId, Vec3> = ids.iter().map(|&id| (id, rotation * motion(id.0 as usize, 0.0).0)).collect();
        let accel: BTreeMap<NodeId, Vec3> = ids.iter().map(|&id| (id, motion(id.0 as usize, 0.0).1)).collect();
        let mut w = FrameWindow::new(0.0, &layout, &accel);
        let mut t = 0.0;
        let dt = 0.001;
        let mut step = 0;
        while t < duration {
            t = step as f64 * dt;
            for &id in &ids {
                w.on_accel(id, t, motion(id.0 as usize, t).1);
            }
            if step % 12 == 0 {
                for a in 0..n {
                    for b in a + 1..n {
                        let d = (motion(b, t).0 - motion(a, t).0).norm();
                        w.on_range(ids[a], ids[b], t, d, 0.1);
                    }
                }
            }
            step += 1;
        }
        (w, t)
    }

    #[test]
    fn recovers_world_frame_from_rotated_mirrored_start() {
        let r = UnitQuat::from_axis_angle(&Vec3::z_axis(), 2.3).to_rotation_matrix().into_inner()
            * nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        let (w, t) = window_for(3, r, 3.0);
        let FrameOutcome::Resolved(sol) = w.solve(t, true, &FrameConfig::default()) else {
            panic!("should resolve");
        };
        for ((i, j), (x, v, _)) in &sol.pairs {
            let (pi, _) = motion(i.0 as usize, t);
            let (pj, _) = motion(j.0 as usize, t);
            assert!((x - (pj - pi)).norm() < 0.02, "pair {i}-{j}: {x} vs {}", pj - pi);
            assert!(v.norm().is_finite());
        }
    }

    #[test]
    fn static_constellation_is_ambiguous() {
        let ids: Vec<NodeId> = (0..3).map(NodeId).collect();
        let pts = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.5, 1.5, 0.0)];
        let layout: BTreeMap<NodeId, Vec3> = ids.iter().map(|&id| (id, pts[id.0 as usize])).collect();
        let mut w = FrameWindow::new(0.0, &layout, &BTreeMap::new());
        for k in 0..300 {
            let t = k as f64 * 0.01;
            for a in 0..3 {
                for b in a + 1..3 {
                    w.on_range(ids[a], ids[b], t, (pts[b] - pts[a]).norm(), 0.1);
                }
            }
        }
        assert_eq!(w.solve(3.0, true, &FrameConfig::default()), FrameOutcome::Ambiguous);
    }
}
