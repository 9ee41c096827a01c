//! Host-side tracking pipeline.
//!
//! Events from all nodes pass through a fixed-lag [`TimelineBuffer`] and are
//! applied in timestamp order to a [`ConstellationPipeline`], which owns one
//! [`PairFilter`] per pair of initialized nodes, initializes new nodes from
//! their first complete rounds and runs the MDS refinement after every round.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::calibration::UwbCalibration;
use crate::ekf::{self, ControlInput, GateConfig, GateOutcome, OutlierGate, PairState, MAX_DT};
use crate::frame::{FrameConfig, FrameOutcome, FrameWindow};
use crate::math::{Matrix, UnitQuat, Vec3};
use crate::mds::{self, DistanceMatrix, EmbeddingDim, InitWindow};
use crate::orientation::LocalEstimate;
use crate::protocol::{NodeId, RangeEstimate, RoundId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Run the MDS refinement after every completed round.
    pub mds: bool,
    /// Blend factor toward the refined layout.
    pub alpha: f64,
    /// Complete rounds averaged before a new node gets filters.
    pub init_rounds: usize,
    /// Fixed lag between arrival and processing, s.
    pub horizon: f64,
    /// Host clock step, s.
    pub tick: f64,
    pub publish_interval: f64,
    pub embedding: EmbeddingDim,
    /// Keep the layout in the horizontal plane (ground vehicles).
    pub planar: bool,
    pub gate_window: usize,
    pub gate_threshold_scale: f64,
    pub lowpass_cutoff_hz: f64,
    pub velocity_variance_factor: f64,
    /// Range noise for pairs listed in `nlos_pairs`.
    pub sigma_nlos: f64,
    pub nlos_pairs: Vec<[u32; 2]>,
    /// Refinement is skipped when the smallest used kernel eigenvalue falls
    /// below this fraction of the largest: a nearly flat embedding does not
    /// fix the orientation of the layout.
    pub min_eigen_ratio: f64,
    /// Added to the position variances after each refinement.
    pub position_inflation: f64,
    /// Inputs older than this make a prediction count as coasting, s.
    pub coast_threshold: f64,
    pub calibration: UwbCalibration,
    /// World-frame resolution after the first initialization.
    pub frame: FrameConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mds: true,
            alpha: 0.5,
            init_rounds: 10,
            horizon: 0.1,
            tick: 0.01,
            publish_interval: 0.05,
            embedding: EmbeddingDim::Auto,
            planar: false,
            gate_window: 5,
            gate_threshold_scale: 3.0,
            lowpass_cutoff_hz: 2.0,
            velocity_variance_factor: 4.0,
            sigma_nlos: 0.275,
            nlos_pairs: Vec::new(),
            min_eigen_ratio: 0.02,
            position_inflation: 1e-4,
            coast_threshold: 0.05,
            calibration: UwbCalibration::default(),
            frame: FrameConfig::default(),
        }
    }
}

fn is_multiple(value: f64, step: f64) -> bool {
    let r = value / step;
    (r - r.round()).abs() < 1e-6
}

impl PipelineConfig {
    /// Validation problems as (field, message).
    pub fn issues(&self, _sensor_rate: f64) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                out.push((field.to_string(), msg.to_string()));
            }
        };
        check((0.0..=1.0).contains(&self.alpha), "alpha", "must be in [0, 1]");
        check(self.init_rounds >= 1, "init_rounds", "must be at least 1");
        check(self.tick > 0.0, "tick", "must be positive");
        check(self.horizon >= 0.0, "horizon", "must be non-negative");
        if self.tick > 0.0 {
            check(is_multiple(self.horizon, self.tick), "horizon", "must be a multiple of tick");
            check(
                self.publish_interval > 0.0 && is_multiple(self.publish_interval, self.tick),
                "publish_interval",
                "must be a positive multiple of tick",
            );
        }
        check(self.gate_window >= ekf::GATE_MIN_SAMPLES, "gate_window", "must be at least 3");
        check(self.gate_threshold_scale > 0.0, "gate_threshold_scale", "must be positive");
        check(self.lowpass_cutoff_hz > 0.0, "lowpass_cutoff_hz", "must be positive");
        check(self.velocity_variance_factor > 0.0, "velocity_variance_factor", "must be positive");
        check(self.sigma_nlos > 0.0, "sigma_nlos", "must be positive");
        check(
            (0.0..1.0).contains(&self.min_eigen_ratio),
            "min_eigen_ratio",
            "must be in [0, 1)",
        );
        check(self.position_inflation >= 0.0, "position_inflation", "must be non-negative");
        check(self.coast_threshold > 0.0, "coast_threshold", "must be positive");
        check(
            self.frame.window > 0.0 && self.frame.max_ranges >= 16,
            "frame",
            "window must be positive and max_ranges at least 16",
        );
        if let Err(e) = self.calibration.validate() {
            check(false, "calibration", &e.to_string());
        }
        out
    }

    fn embedding_mode(&self) -> EmbeddingDim {
        if self.planar {
            EmbeddingDim::Two
        } else {
            self.embedding
        }
    }

    fn horizon_ticks(&self) -> i64 {
        (self.horizon / self.tick).round() as i64
    }

    fn publish_every(&self) -> i64 {
        ((self.publish_interval / self.tick).round() as i64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    Join(NodeId),
    Leave(NodeId),
    Local { node: NodeId, estimate: LocalEstimate },
    Range(RangeEstimate),
}

impl PipelineEvent {
    /// Tie-break order for simultaneous events.
    fn rank(&self) -> u8 {
        match self {
            Self::Join(_) => 0,
            Self::Local { .. } => 1,
            Self::Range(_) => 2,
            Self::Leave(_) => 3,
        }
    }

    fn ids(&self) -> (u32, u32, u64) {
        match self {
            Self::Join(n) | Self::Leave(n) => (n.0, 0, 0),
            Self::Local { node, .. } => (node.0, 0, 0),
            Self::Range(r) => (r.pair.0 .0, r.pair.1 .0, r.round.seq),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EventKey {
    t: f64,
    rank: u8,
    a: u32,
    b: u32,
    seq: u64,
    ingest: u64,
}

impl PartialEq for EventKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for EventKey {}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.rank.cmp(&other.rank))
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
            .then(self.seq.cmp(&other.seq))
            .then(self.ingest.cmp(&other.ingest))
    }
}

/// Fixed-lag reordering buffer.
///
/// Events are held until the host clock passes their timestamp by the horizon
/// and are then released in timestamp order. Anything arriving for a time that
/// has already been released is dropped and counted.
#[derive(Debug, Clone)]
pub struct TimelineBuffer {
    pub horizon: f64,
    queue: BTreeMap<EventKey, PipelineEvent>,
    watermark: f64,
    released_until: f64,
    ingested: u64,
    late: u64,
}

impl TimelineBuffer {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            queue: BTreeMap::new(),
            watermark: f64::NEG_INFINITY,
            released_until: f64::NEG_INFINITY,
            ingested: 0,
            late: 0,
        }
    }

    pub fn watermark(&self) -> f64 {
        self.watermark
    }

    pub fn late_events(&self) -> u64 {
        self.late
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Queues an event stamped `t`. Returns false if it came too late.
    pub fn ingest(&mut self, t: f64, event: PipelineEvent) -> bool {
        if t <= self.released_until {
            self.late += 1;
            return false;
        }
        let (a, b, seq) = event.ids();
        self.ingested += 1;
        let key = EventKey {
            t,
            rank: event.rank(),
            a,
            b,
            seq,
            ingest: self.ingested,
        };
        self.queue.insert(key, event);
        true
    }

    /// Moves the host clock to `now` and releases everything up to `now - horizon`.
    pub fn advance(&mut self, now: f64) -> Vec<(f64, PipelineEvent)> {
        self.release(now, now - self.horizon)
    }

    /// Like [`advance`](Self::advance) with an explicit cutoff.
    pub fn release(&mut self, now: f64, cutoff: f64) -> Vec<(f64, PipelineEvent)> {
        self.watermark = self.watermark.max(now);
        let cutoff = cutoff.min(self.watermark - self.horizon).max(self.released_until);
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().t > cutoff {
                break;
            }
            let t = entry.key().t;
            out.push((t, entry.remove()));
        }
        self.released_until = cutoff;
        out
    }
}

/// Filter and gate of one node pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFilter {
    pub state: PairState,
    pub gate: OutlierGate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeldInput {
    t: f64,
    a: Vec3,
    q: UnitQuat,
    a_cov: Matrix3<f64>,
    q_cov: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct RoundTracker {
    id: RoundId,
    ranges: BTreeMap<(NodeId, NodeId), f64>,
    done: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub late_events: u64,
    pub unknown_node_events: u64,
    pub predictions: u64,
    pub coasting_predictions: u64,
    pub updates: u64,
    pub rejected_ranges: u64,
    pub skipped_updates: u64,
    pub rounds: u64,
    pub refinements: u64,
    pub degenerate_refinements: u64,
    pub low_confidence_alignments: u64,
    pub initializations: u64,
    pub failed_initializations: u64,
    pub frame_resolutions: u64,
    pub ambiguous_frames: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePosition {
    pub id: u32,
    pub pos: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub i: u32,
    pub j: u32,
    pub x_ij: [f64; 3],
    pub d: f64,
}

/// Published relative layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub t: f64,
    pub nodes: Vec<NodePosition>,
    pub pairs: Vec<PairRecord>,
}

pub fn to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone)]
pub struct ConstellationPipeline {
    config: PipelineConfig,
    gate: GateConfig,
    nlos: BTreeSet<(NodeId, NodeId)>,
    nodes: BTreeSet<NodeId>,
    initialized: BTreeSet<NodeId>,
    filters: BTreeMap<(NodeId, NodeId), PairFilter>,
    inputs: BTreeMap<NodeId, HeldInput>,
    layout: BTreeMap<NodeId, Vec3>,
    init: Option<InitWindow>,
    round: Option<RoundTracker>,
    frame: Option<FrameWindow>,
    frame_resolved: bool,
    pub stats: PipelineStats,
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ConstellationPipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let gate = GateConfig {
            window: config.gate_window,
            threshold_scale: config.gate_threshold_scale,
            sigma_d: config.calibration.sigma_d,
            cutoff_hz: config.lowpass_cutoff_hz,
            velocity_variance_factor: config.velocity_variance_factor,
        };
        let nlos = config
            .nlos_pairs
            .iter()
            .map(|p| ordered(NodeId(p[0]), NodeId(p[1])))
            .collect();
        Self {
            config,
            gate,
            nlos,
            nodes: BTreeSet::new(),
            initialized: BTreeSet::new(),
            filters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            layout: BTreeMap::new(),
            init: None,
            round: None,
            frame: None,
            frame_resolved: false,
            stats: PipelineStats::default(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn initialized(&self) -> &BTreeSet<NodeId> {
        &self.initialized
    }

    pub fn filters(&self) -> &BTreeMap<(NodeId, NodeId), PairFilter> {
        &self.filters
    }

    pub fn layout(&self) -> &BTreeMap<NodeId, Vec3> {
        &self.layout
    }

    /// Whether the filters are known to share the world frame of the accelerations.
    pub fn frame_resolved(&self) -> bool {
        self.frame_resolved
    }

    pub fn on_node_join(&mut self, id: NodeId) {
        if self.nodes.insert(id) {
            debug!("node {id} joined");
            self.restart_init();
        }
    }

    pub fn on_node_leave(&mut self, id: NodeId) {
        if !self.nodes.remove(&id) {
            return;
        }
        debug!("node {id} left");
        self.initialized.remove(&id);
        self.filters.retain(|(i, j), _| *i != id && *j != id);
        self.inputs.remove(&id);
        self.layout.remove(&id);
        if let Some(r) = self.round.as_mut() {
            r.ranges.retain(|(i, j), _| *i != id && *j != id);
        }
        if self.frame.as_ref().is_some_and(|w| w.nodes().contains(&id)) {
            self.frame = None;
        }
        if self.initialized.len() < 2 {
            self.frame_resolved = false;
        }
        self.restart_init();
    }

    fn restart_init(&mut self) {
        let pending: BTreeSet<NodeId> = self.nodes.difference(&self.initialized).copied().collect();
        self.init = if pending.is_empty() {
            None
        } else {
            Some(InitWindow::new(&self.nodes, &pending, self.config.init_rounds))
        };
    }

    /// Applies one released event.
    pub fn process(&mut self, t: f64, event: PipelineEvent) {
        match event {
            PipelineEvent::Join(id) => self.on_node_join(id),
            PipelineEvent::Leave(id) => self.on_node_leave(id),
            PipelineEvent::Local { node, estimate } => self.on_local(node, &estimate),
            PipelineEvent::Range(r) => self.on_range(t, &r),
        }
    }

    fn on_local(&mut self, node: NodeId, est: &LocalEstimate) {
        if !self.nodes.contains(&node) {
            self.stats.unknown_node_events += 1;
            return;
        }
        let keys: Vec<(NodeId, NodeId)> = self
            .filters
            .keys()
            .filter(|(i, j)| *i == node || *j == node)
            .copied()
            .collect();
        for key in keys {
            self.predict_filter(key, est.timestamp);
        }
        if let Some(w) = self.frame.as_mut() {
            w.on_accel(node, est.timestamp, est.a_hat);
        }
        self.inputs.insert(
            node,
            HeldInput {
                t: est.timestamp,
                a: est.a_hat,
                q: est.q_hat,
                a_cov: est.a_cov,
                q_cov: est.q_cov,
            },
        );
    }

    fn control(&self, i: NodeId, j: NodeId, at: f64, dt: f64) -> (ControlInput, ekf::Mat12, bool) {
        let zero = HeldInput {
            t: f64::NEG_INFINITY,
            a: Vec3::zeros(),
            q: UnitQuat::identity(),
            a_cov: Matrix3::zeros(),
            q_cov: Matrix3::zeros(),
        };
        let hi = self.inputs.get(&i).copied().unwrap_or(zero);
        let hj = self.inputs.get(&j).copied().unwrap_or(zero);
        let coasting = at - hi.t > self.config.coast_threshold || at - hj.t > self.config.coast_threshold;
        let u = ControlInput {
            a_i: hi.a,
            a_j: hj.a,
            q_i: hi.q,
            q_j: hj.q,
            dt,
        };
        (u, ekf::input_covariance(&hi.a_cov, &hj.a_cov, &hi.q_cov, &hj.q_cov), coasting)
    }

    fn predicted(&mut self, key: (NodeId, NodeId), mut state: PairState, t: f64) -> PairState {
        loop {
            let remaining = t - state.t;
            if remaining <= 1e-12 {
                break;
            }
            let dt = remaining.min(MAX_DT);
            let (u, sigma, coasting) = self.control(key.0, key.1, state.t + dt, dt);
            self.stats.predictions += 1;
            if coasting {
                self.stats.coasting_predictions += 1;
            }
            match ekf::predict(&state, &u, &sigma) {
                Ok(next) => state = next,
                Err(e) => {
                    warn!("prediction for {key:?} failed: {e}");
                    break;
                }
            }
        }
        state
    }

    fn predict_filter(&mut self, key: (NodeId, NodeId), t: f64) {
        let Some(state) = self.filters.get(&key).map(|f| f.state) else {
            return;
        };
        let next = self.predicted(key, state, t);
        if let Some(f) = self.filters.get_mut(&key) {
            f.state = next;
        }
    }

    fn on_range(&mut self, t: f64, r: &RangeEstimate) {
        let key = ordered(r.pair.0, r.pair.1);
        if !self.nodes.contains(&key.0) || !self.nodes.contains(&key.1) {
            self.stats.unknown_node_events += 1;
            return;
        }
        if self.round.as_ref().is_none_or(|cur| cur.id != r.round) {
            self.finish_round(t);
            self.round = Some(RoundTracker {
                id: r.round,
                ranges: BTreeMap::new(),
                done: false,
            });
        }
        let d_cal = self.config.calibration.invert(r.distance_raw);
        if let Some(tracker) = self.round.as_mut() {
            tracker.ranges.insert(key, d_cal);
        }
        if let Some(w) = self.frame.as_mut() {
            let sigma = if self.nlos.contains(&key) {
                self.config.sigma_nlos
            } else {
                self.config.calibration.sigma_d
            };
            w.on_range(key.0, key.1, r.timestamp, d_cal, sigma);
        }

        if self.filters.contains_key(&key) {
            self.predict_filter(key, r.timestamp);
            let filter = self.filters.get_mut(&key).expect("checked");
            let last_v = filter.state.v.norm();
            match filter.gate.gate_and_derive(d_cal, r.timestamp, last_v) {
                GateOutcome::Accepted(obs) => match ekf::correct(&filter.state, &obs) {
                    Ok((next, _)) => {
                        filter.state = next;
                        self.stats.updates += 1;
                    }
                    Err(e) => {
                        self.stats.skipped_updates += 1;
                        warn!("update for {key:?} skipped: {e}");
                    }
                },
                GateOutcome::Rejected { .. } => self.stats.rejected_ranges += 1,
            }
        }

        let expected = self.nodes.len() * (self.nodes.len() - 1) / 2;
        if self.round.as_ref().is_some_and(|r| r.ranges.len() >= expected) {
            self.finish_round(t);
        }
    }

    fn finish_round(&mut self, t: f64) {
        let Some(tracker) = self.round.as_mut() else {
            return;
        };
        if tracker.done {
            return;
        }
        tracker.done = true;
        self.stats.rounds += 1;
        let ranges = tracker.ranges.clone();

        if let Some(window) = self.init.as_mut() {
            let orientations: BTreeMap<NodeId, UnitQuat> = self.inputs.iter().map(|(id, h)| (*id, h.q)).collect();
            window.push_round(&ranges, &orientations);
            if window.is_ready() {
                self.initialize(t);
                self.resolve_frame(t);
                return;
            }
        }
        if self.config.mds && self.initialized.len() >= 3 {
            self.refine(t);
        } else {
            self.update_layout();
        }
        self.resolve_frame(t);
    }

    /// Collects the frame window and, once it is long enough, moves the
    /// filters into the world frame if the fit is unambiguous.
    fn resolve_frame(&mut self, t: f64) {
        if !self.config.frame.enabled || self.frame_resolved || self.initialized.len() < 3 {
            return;
        }
        let Some(window) = self.frame.as_ref() else {
            let accel = self.inputs.iter().map(|(id, h)| (*id, h.a)).collect();
            let start: BTreeMap<NodeId, Vec3> = self
                .layout
                .iter()
                .filter(|(id, _)| self.initialized.contains(id))
                .map(|(id, p)| (*id, *p))
                .collect();
            self.frame = Some(FrameWindow::new(t, &start, &accel));
            return;
        };
        if t - window.start() < self.config.frame.window {
            return;
        }
        let outcome = window.solve(t, self.config.planar, &self.config.frame);
        self.frame = None;
        match outcome {
            FrameOutcome::Resolved(sol) => {
                for ((i, j), (x, v, p)) in sol.pairs {
                    self.predict_filter((i, j), t);
                    if let Some(f) = self.filters.get_mut(&(i, j)) {
                        f.state.x = x;
                        f.state.v = v;
                        f.state.p = p;
                    }
                }
                self.frame_resolved = true;
                self.stats.frame_resolutions += 1;
                self.update_layout();
                debug!("frame resolved at t={t:.3}, cost {:.3}", sol.cost);
            }
            FrameOutcome::Ambiguous => {
                self.stats.ambiguous_frames += 1;
                debug!("frame still ambiguous at t={t:.3}");
            }
        }
    }

    fn initialize(&mut self, t: f64) {
        let Some(window) = self.init.clone() else {
            return;
        };
        // bring existing filters to the same instant before reading the layout
        let keys: Vec<_> = self.filters.keys().copied().collect();
        for key in keys {
            self.predict_filter(key, t);
        }
        self.update_layout();
        let mut existing: BTreeMap<NodeId, Vec3> = self
            .layout
            .iter()
            .filter(|(id, _)| self.initialized.contains(id))
            .map(|(id, p)| (*id, *p))
            .collect();
        if self.config.planar {
            for p in existing.values_mut() {
                p.z = 0.0;
            }
        }
        match window.initialize(&existing, self.config.embedding_mode(), t) {
            Ok(init) => {
                if init.low_confidence && !existing.is_empty() {
                    self.stats.low_confidence_alignments += 1;
                }
                for (key, state) in init.pairs {
                    let mut gate = self.gate;
                    if self.nlos.contains(&key) {
                        gate.sigma_d = self.config.sigma_nlos;
                    }
                    self.filters.insert(
                        key,
                        PairFilter {
                            state,
                            gate: OutlierGate::new(gate),
                        },
                    );
                }
                self.initialized.extend(window.pending().iter().copied());
                self.init = None;
                self.frame = None;
                self.stats.initializations += 1;
                self.update_layout();
                debug!("initialized {} nodes at t={t:.3}", self.initialized.len());
            }
            Err(e) => {
                self.stats.failed_initializations += 1;
                warn!("initialization failed: {e}");
            }
        }
    }

    fn relative_positions(&self) -> BTreeMap<(NodeId, NodeId), Vec3> {
        self.filters.iter().map(|(k, f)| (*k, f.state.x)).collect()
    }

    fn update_layout(&mut self) {
        let ids: Vec<NodeId> = self.initialized.iter().copied().collect();
        self.layout = mds::implied_positions(&ids, &self.relative_positions());
    }

    fn refine(&mut self, t: f64) {
        let ids: Vec<NodeId> = self.initialized.iter().copied().collect();
        let keys: Vec<_> = self.filters.keys().copied().collect();
        for key in keys {
            self.predict_filter(key, t);
        }
        let n = ids.len();
        let mut d = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a + 1..n {
                let Some(f) = self.filters.get(&(ids[a], ids[b])) else {
                    self.update_layout();
                    return;
                };
                let v = f.state.x.norm();
                d[(a, b)] = v;
                d[(b, a)] = v;
            }
        }
        let solution = match DistanceMatrix::new(d).and_then(|d| mds::classical_mds(&d, self.config.embedding_mode())) {
            Ok(s) => s,
            Err(e) => {
                self.stats.degenerate_refinements += 1;
                debug!("refinement skipped: {e}");
                self.update_layout();
                return;
            }
        };
        let used = solution.embedding_dim_used.min(n);
        let ratio = solution.eigenvalues[used - 1] / solution.eigenvalues[0];
        if ratio < self.config.min_eigen_ratio {
            self.stats.degenerate_refinements += 1;
            self.update_layout();
            return;
        }
        let implied = mds::implied_positions(&ids, &self.relative_positions());
        let reference: Vec<Vec3> = ids
            .iter()
            .map(|id| {
                let mut p = implied[id];
                if self.config.planar {
                    p.z = 0.0;
                }
                p
            })
            .collect();
        let fit = match mds::align_to_reference(&solution.positions, &reference, &vec![1.0; n], true) {
            Ok(f) => f,
            Err(e) => {
                self.stats.degenerate_refinements += 1;
                debug!("alignment failed: {e}");
                self.update_layout();
                return;
            }
        };
        if fit.low_confidence {
            self.stats.low_confidence_alignments += 1;
        }
        let positions: BTreeMap<NodeId, Vec3> = ids.iter().copied().zip(fit.aligned).collect();
        mds::refine_pair_states(
            self.filters.iter_mut().map(|(k, f)| (k, &mut f.state)),
            &positions,
            self.config.alpha,
            self.config.position_inflation,
        );
        self.stats.refinements += 1;
        self.update_layout();
    }

    /// Layout predicted to `t` without touching the filters.
    pub fn snapshot(&mut self, t: f64) -> LayoutSnapshot {
        let stats = self.stats;
        let mut relative = BTreeMap::new();
        let mut pairs = Vec::with_capacity(self.filters.len());
        let entries: Vec<_> = self.filters.iter().map(|(k, f)| (*k, f.state)).collect();
        for (key, state) in entries {
            let s = self.predicted(key, state, t);
            relative.insert(key, s.x);
            pairs.push(PairRecord {
                i: key.0 .0,
                j: key.1 .0,
                x_ij: to_array(&s.x),
                d: s.x.norm(),
            });
        }
        // snapshot predictions are not part of the filter history
        self.stats = stats;
        let ids: Vec<NodeId> = self.initialized.iter().copied().collect();
        let nodes = mds::implied_positions(&ids, &relative)
            .into_iter()
            .map(|(id, p)| NodePosition {
                id: id.0,
                pos: to_array(&p),
            })
            .collect();
        LayoutSnapshot { t, nodes, pairs }
    }
}

/// One input to [`run_pipeline`]: an event with its timestamp and host arrival time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub t: f64,
    pub arrival: f64,
    pub event: PipelineEvent,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub snapshots: Vec<LayoutSnapshot>,
    pub stats: PipelineStats,
}

/// Drives the buffer and pipeline on the host tick grid until `end`.
///
/// Snapshots are published every `publish_interval` at `now - horizon`.
pub fn run_pipeline(config: &PipelineConfig, events: &[TimedEvent], end: f64) -> PipelineRun {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| events[a].arrival.total_cmp(&events[b].arrival));
    let mut pipeline = ConstellationPipeline::new(config.clone());
    let mut buffer = TimelineBuffer::new(config.horizon);
    let tick = config.tick;
    let h = config.horizon_ticks();
    let every = config.publish_every();
    let last = ((end + config.horizon) / tick).ceil() as i64;
    let mut next = 0;
    let mut snapshots = Vec::new();
    for m in 0..=last {
        let now = m as f64 * tick;
        while next < order.len() && events[order[next]].arrival <= now + 1e-9 {
            let e = &events[order[next]];
            buffer.ingest(e.t, e.event.clone());
            next += 1;
        }
        let cutoff = (m - h) as f64 * tick;
        for (t, event) in buffer.release(now, cutoff) {
            pipeline.process(t, event);
        }
        if m >= h && (m - h) % every == 0 && cutoff <= end + 1e-9 {
            snapshots.push(pipeline.snapshot(cutoff));
        }
    }
    let mut stats = pipeline.stats;
    stats.late_events = buffer.late_events();
    PipelineRun { snapshots, stats }
}
