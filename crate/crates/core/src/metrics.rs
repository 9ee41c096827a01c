//! Relative position error of published layouts against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::pipeline::LayoutSnapshot;

/// Ground-truth positions at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub positions: BTreeMap<u32, Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub t: f64,
    pub i: u32,
    pub j: u32,
    pub estimate: Vec3,
    pub truth: Vec3,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub i: u32,
    pub j: u32,
    pub rmse: f64,
    pub distance_rmse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBin {
    pub t_start: f64,
    pub rmse: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Root mean square of the pair errors over all pairs and snapshots.
    pub rmse: f64,
    /// Same for the scalar distance `|x_ij|`.
    pub distance_rmse: f64,
    pub samples: usize,
    pub per_pair: Vec<PairMetrics>,
    pub trace: Vec<TraceBin>,
    /// Snapshots matched to a truth sample more than one truth period away.
    pub misaligned: usize,
    pub warmup: f64,
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (sum_sq / n as f64).sqrt()
    }
}

/// Truth sample period, taken as the median spacing.
fn truth_period(truth: &[TruthSample]) -> f64 {
    let mut gaps: Vec<f64> = truth.windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.is_empty() {
        return f64::INFINITY;
    }
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2]
}

fn nearest(truth: &[TruthSample], t: f64) -> Option<&TruthSample> {
    let k = truth.partition_point(|s| s.t < t);
    let after = truth.get(k);
    let before = k.checked_sub(1).and_then(|b| truth.get(b));
    match (before, after) {
        (Some(b), Some(a)) => Some(if t - b.t <= a.t - t { b } else { a }),
        (b, a) => b.or(a),
    }
}

/// Per-pair errors `|x_ij - (x_j - x_i)|` of every snapshot after `warmup`.
///
/// Each snapshot is matched to the nearest truth sample; the second value
/// counts matches further away than one truth period.
pub fn pair_errors(snapshots: &[LayoutSnapshot], truth: &[TruthSample], warmup: f64) -> (Vec<PairError>, usize) {
    let period = truth_period(truth);
    let mut out = Vec::new();
    let mut misaligned = 0;
    for snap in snapshots.iter().filter(|s| s.t >= warmup) {
        let Some(gt) = nearest(truth, snap.t) else {
            continue;
        };
        if (gt.t - snap.t).abs() > period + 1e-9 {
            misaligned += 1;
        }
        for p in &snap.pairs {
            let (Some(xi), Some(xj)) = (gt.positions.get(&p.i), gt.positions.get(&p.j)) else {
                continue;
            };
            let estimate = Vec3::from(p.x_ij);
            let truth = xj - xi;
            out.push(PairError {
                t: snap.t,
                i: p.i,
                j: p.j,
                estimate,
                truth,
                err: (estimate - truth).norm(),
            });
        }
    }
    (out, misaligned)
}

pub fn compute_metrics(
    snapshots: &[LayoutSnapshot],
    truth: &[TruthSample],
    warmup: f64,
    bin_width: Option<f64>,
) -> MetricsReport {
    let (errors, misaligned) = pair_errors(snapshots, truth, warmup);
    let mut sum = 0.0;
    let mut sum_d = 0.0;
    let mut pairs: BTreeMap<(u32, u32), (f64, f64, usize)> = BTreeMap::new();
    let width = bin_width.unwrap_or(10.0);
    let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for e in &errors {
        let dd = e.estimate.norm() - e.truth.norm();
        sum += e.err * e.err;
        sum_d += dd * dd;
        let p = pairs.entry((e.i, e.j)).or_default();
        p.0 += e.err * e.err;
        p.1 += dd * dd;
        p.2 += 1;
        let b = bins.entry((e.t / width).floor() as i64).or_default();
        b.0 += e.err * e.err;
        b.1 += 1;
    }
    MetricsReport {
        rmse: rms(sum, errors.len()),
        distance_rmse: rms(sum_d, errors.len()),
        samples: errors.len(),
        per_pair: pairs
            .into_iter()
            .map(|((i, j), (s, sd, n))| PairMetrics {
                i,
                j,
                rmse: rms(s, n),
                distance_rmse: rms(sd, n),
                samples: n,
            })
            .collect(),
        trace: bins
            .into_iter()
            .map(|(k, (s, n))| TraceBin {
                t_start: k as f64 * width,
                rmse: rms(s, n),
                samples: n,
            })
            .collect(),
        misaligned,
        warmup,
    }
}
