//! Protocol timing measurements: round rate, settling after cohort changes and
//! recovery from an initiator dropout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::protocol::{ClockModel, MessageKind, NodeId, ProtocolParams, RoundId};
use crate::sim::config::ScenarioConfig;
use crate::sim::network::{FixedChannel, NetEvent, NetworkSim};
use crate::sim::run::RunError;

/// Relative tolerance for matching a round period.
const PERIOD_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub n: usize,
    pub measured: f64,
    pub ideal: f64,
    pub rel_error: f64,
    /// Fraction of rounds that produced every pairwise range.
    pub complete_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    ResponderJoin,
    ResponderLeave,
    InitiatorJoin,
    InitiatorDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortChange {
    pub t: f64,
    pub node: u32,
    pub kind: ChangeKind,
    pub n_before: usize,
    pub n_after: usize,
    /// Time from the change to the first range of the first steady round of the new cohort.
    pub settle_time: Option<f64>,
    /// Rounds started between the change and the end of `settle_time`,
    /// the steady round included.
    pub settle_rounds: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    pub t: f64,
    pub hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params: ProtocolParams,
    pub changes: Vec<CohortChange>,
    /// Complete rounds per second in fixed bins.
    pub trace: Vec<RateSample>,
}

#[derive(Debug, Clone, Default)]
struct RoundLog {
    start: f64,
    pairs: BTreeSet<(NodeId, NodeId)>,
    first_range: Option<f64>,
}

struct Recorded {
    rounds: BTreeMap<RoundId, RoundLog>,
}

fn record(events: &[NetEvent]) -> Recorded {
    let mut rounds: BTreeMap<RoundId, RoundLog> = BTreeMap::new();
    for e in events {
        match e {
            NetEvent::Transmit {
                kind: MessageKind::Request,
                round,
                t,
                ..
            } => {
                rounds.entry(*round).or_default().start = *t;
            }
            NetEvent::Range { estimate, emitted_at } => {
                let r = rounds.entry(estimate.round).or_default();
                r.pairs.insert(estimate.pair);
                r.first_range.get_or_insert(*emitted_at);
            }
            _ => {}
        }
    }
    Recorded { rounds }
}

fn all_pairs(nodes: &BTreeSet<NodeId>) -> BTreeSet<(NodeId, NodeId)> {
    let v: Vec<NodeId> = nodes.iter().copied().collect();
    let mut out = BTreeSet::new();
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            out.insert((v[a], v[b]));
        }
    }
    out
}

/// Rounds that ranged exactly the pairs of `cohort`, ordered by start time.
fn complete_rounds<'a>(rec: &'a Recorded, cohort: &BTreeSet<NodeId>) -> Vec<&'a RoundLog> {
    let want = all_pairs(cohort);
    let mut v: Vec<&RoundLog> = rec.rounds.values().filter(|r| r.pairs == want).collect();
    v.sort_by(|a, b| a.start.total_cmp(&b.start));
    v
}

fn line_positions(ids: &[NodeId]) -> BTreeMap<NodeId, Vec3> {
    ids.iter()
        .enumerate()
        .map(|(k, id)| (*id, Vec3::new(1.3 * k as f64, 0.4 * (k % 2) as f64, 0.0)))
        .collect()
}

/// Round rate of `n` always-on nodes on a lossless channel, after a one second settle.
///
/// `ideal` is the inverse nominal round period, which includes any configured overhead.
pub fn measure_frequency(params: &ProtocolParams, n: usize, window: f64) -> FrequencyPoint {
    let ids: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
    let mut sim = NetworkSim::new(
        *params,
        FixedChannel {
            positions: line_positions(&ids),
        },
    );
    sim.record_transmissions = true;
    for id in &ids {
        let clock = ClockModel {
            offset: 0.31 * id.0 as f64 - 0.9,
            drift_ppm: 0.0,
        };
        sim.add_node(*id, clock);
        sim.schedule_activation(*id, 1e-3 * id.0 as f64);
    }
    let mut events = Vec::new();
    let start = 1.0;
    sim.run_until(start + window, &mut events);
    let rec = record(&events);
    let starts: Vec<f64> = {
        let mut s: Vec<f64> = rec
            .rounds
            .values()
            .map(|r| r.start)
            .filter(|&t| t >= start && t <= start + window)
            .collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let measured = if starts.len() >= 2 {
        (starts.len() - 1) as f64 / (starts[starts.len() - 1] - starts[0])
    } else {
        0.0
    };
    let cohort: BTreeSet<NodeId> = ids.iter().copied().collect();
    let in_window = rec.rounds.values().filter(|r| r.start >= start && r.start <= start + window - 0.1);
    let (mut total, mut complete) = (0usize, 0usize);
    let want = all_pairs(&cohort);
    for r in in_window {
        total += 1;
        complete += (r.pairs == want) as usize;
    }
    let ideal = 1.0 / params.round_period(n);
    FrequencyPoint {
        n,
        measured,
        ideal,
        rel_error: (measured - ideal).abs() / ideal,
        complete_fraction: if total == 0 { 0.0 } else { complete as f64 / total as f64 },
    }
}

/// Runs the scripted join/leave schedule of a scenario on a lossless channel
/// at the nodes' starting positions and times each cohort change.
pub fn protocol_bench(cfg: &ScenarioConfig, bin: f64) -> Result<BenchReport, RunError> {
    cfg.validate()?;
    let trajectories = cfg.build_trajectories()?;
    let mut positions = BTreeMap::new();
    for (node, tr) in cfg.nodes.iter().zip(&trajectories) {
        let t0 = node.activate.max(tr.domain().0);
        positions.insert(NodeId(node.id), tr.pose(t0)?.position);
    }
    let mut sim = NetworkSim::new(cfg.protocol, FixedChannel { positions });
    sim.record_transmissions = true;
    let mut schedule: Vec<(f64, NodeId, bool)> = Vec::new();
    for node in &cfg.nodes {
        let id = NodeId(node.id);
        sim.add_node(id, ClockModel::default());
        sim.schedule_activation(id, node.activate);
        schedule.push((node.activate, id, true));
        if let Some(t) = node.deactivate {
            sim.schedule_deactivation(id, t);
            schedule.push((t, id, false));
        }
    }
    schedule.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut events = Vec::new();
    sim.run_until(cfg.duration, &mut events);
    let rec = record(&events);

    // cohorts between consecutive schedule changes
    let mut active: BTreeSet<NodeId> = BTreeSet::new();
    let mut changes = Vec::new();
    let mut k = 0;
    while k < schedule.len() {
        let t = schedule[k].0;
        let before = active.clone();
        let mut batch = Vec::new();
        while k < schedule.len() && schedule[k].0 == t {
            let (_, id, on) = schedule[k];
            if on {
                active.insert(id);
            } else {
                active.remove(&id);
            }
            batch.push((id, on));
            k += 1;
        }
        // the initial power-up is not a cohort change
        if before.is_empty() {
            continue;
        }
        let next_change = schedule.get(k).map_or(cfg.duration, |s| s.0);
        for (id, on) in batch {
            let kind = match (on, before.first()) {
                (true, Some(&min)) if id < min => ChangeKind::InitiatorJoin,
                (true, _) => ChangeKind::ResponderJoin,
                (false, Some(&min)) if id == min => ChangeKind::InitiatorDropout,
                (false, _) => ChangeKind::ResponderLeave,
            };
            let settle = settle_time(&rec, &active, &cfg.protocol, t, next_change);
            changes.push(CohortChange {
                t,
                node: id.0,
                kind,
                n_before: before.len(),
                n_after: active.len(),
                settle_time: settle,
                settle_rounds: settle.map(|s| rounds_started(&rec, t, t + s)),
            });
        }
    }

    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for r in rec.rounds.values() {
        let complete = r.pairs.len() >= 1 && {
            let nodes: BTreeSet<NodeId> = r.pairs.iter().flat_map(|p| [p.0, p.1]).collect();
            r.pairs == all_pairs(&nodes)
        };
        if complete {
            *counts.entry((r.start / bin).floor() as i64).or_default() += 1;
        }
    }
    let n_bins = (cfg.duration / bin).ceil() as i64;
    let trace = (0..n_bins)
        .map(|b| RateSample {
            t: b as f64 * bin,
            hz: counts.get(&b).copied().unwrap_or(0) as f64 / bin,
        })
        .collect();
    Ok(BenchReport {
        params: cfg.protocol,
        changes,
        trace,
    })
}

fn rounds_started(rec: &Recorded, from: f64, to: f64) -> u32 {
    rec.rounds.values().filter(|r| r.start >= from && r.start <= to).count() as u32
}

/// First steady round of `cohort` after `t`: it ranges every pair and the next
/// round starts one nominal period later.
fn settle_time(rec: &Recorded, cohort: &BTreeSet<NodeId>, params: &ProtocolParams, t: f64, until: f64) -> Option<f64> {
    if cohort.len() < 2 {
        return None;
    }
    let period = params.round_period(cohort.len());
    let all_starts: Vec<f64> = {
        let mut s: Vec<f64> = rec.rounds.values().map(|r| r.start).filter(|&s| s > 0.0).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    for r in complete_rounds(rec, cohort) {
        if r.start < t || r.start > until {
            continue;
        }
        let next = all_starts.iter().find(|&&s| s > r.start + 1e-12)?;
        if ((next - r.start) - period).abs() <= PERIOD_TOLERANCE * period {
            return r.first_range.map(|f| f - t);
        }
    }
    None
}
