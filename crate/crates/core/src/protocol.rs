//! Broadcast single-sided two-way ranging.
//!
//! Every node runs the same deterministic state machine. Nodes start as
//! initiators and fall back to responder as soon as they hear a smaller ID. The
//! initiator broadcasts a request; responders reply in slots ordered by their
//! position in the sorted routing table. Every message carries the receive
//! timestamps of all earlier messages in the round, so any listener can resolve
//! the time of flight between itself and a later sender, including pairs of
//! responders.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Time of flight below this value is treated as invalid rather than noise.
/// Corresponds to roughly one meter of negative range.
pub const NEGATIVE_TOF_FLOOR: f64 = -3.3e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("at least two nodes are required, got {0}")]
    TooFewNodes(usize),
    #[error("message time must be positive, got {0}")]
    InvalidMessageTime(f64),
    #[error("time of flight {0} s is below the noise floor")]
    InvalidTof(f64),
    #[error("timestamps are not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies one ranging round: the initiator that opened it and its counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoundId {
    pub initiator: NodeId,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Request,
    Reply,
}

/// One earlier message of the round as seen by the sender of the carrying message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedTimestamp {
    /// Sender of the earlier message.
    pub node: NodeId,
    /// When the carrying message's sender received it (its own clock).
    pub rx_timestamp: f64,
    /// When `node` sent it (the clock of `node`).
    pub tx_timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangingMessage {
    pub sender: NodeId,
    pub kind: MessageKind,
    /// Transmit time on the sender's clock.
    pub tx_timestamp: f64,
    pub embedded_timestamps: Vec<EmbeddedTimestamp>,
    pub initiator: NodeId,
    pub sequence: u64,
}

impl RangingMessage {
    pub fn round(&self) -> RoundId {
        RoundId {
            initiator: self.initiator,
            seq: self.sequence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    /// Ordered pair, first < second.
    pub pair: (NodeId, NodeId),
    pub tof: f64,
    pub distance_raw: f64,
    /// Midpoint of the transaction in global time.
    pub timestamp: f64,
    pub round: RoundId,
}

/// Single-sided two-way ranging: half the round trip minus the responder turnaround.
///
/// Timestamps `t_i_*` are on device i's clock and `t_j_*` on device j's clock, so a
/// constant offset on either clock cancels.
pub fn resolve_tof(
    t_i_sent: f64,
    t_j_received: f64,
    t_j_sent: f64,
    t_i_received: f64,
) -> Result<f64, ProtocolError> {
    let tof = 0.5 * ((t_i_received - t_i_sent) - (t_j_sent - t_j_received));
    if !tof.is_finite() {
        return Err(ProtocolError::NonFinite);
    }
    if tof < NEGATIVE_TOF_FLOOR {
        return Err(ProtocolError::InvalidTof(tof));
    }
    Ok(tof)
}

/// Rate at which all pairwise distances of `n` nodes are refreshed.
pub fn ideal_frequency(n: usize, t_msg: f64) -> Result<f64, ProtocolError> {
    if n < 2 {
        return Err(ProtocolError::TooFewNodes(n));
    }
    if !(t_msg > 0.0) {
        return Err(ProtocolError::InvalidMessageTime(t_msg));
    }
    Ok(1.0 / (t_msg * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    /// Air time plus processing per message, s.
    pub t_msg: f64,
    /// Extra idle time per round, s.
    pub round_overhead: f64,
    pub watchdog: f64,
    /// A node unheard for this many round periods is dropped from the routing table.
    pub expiry_rounds: u32,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            t_msg: 1.0 / (81.83 * 3.0),
            round_overhead: 0.0,
            watchdog: 0.7,
            expiry_rounds: 3,
        }
    }
}

impl ProtocolParams {
    pub fn round_period(&self, n: usize) -> f64 {
        n.max(1) as f64 * self.t_msg + self.round_overhead
    }

    pub fn expiry_age(&self, n: usize) -> f64 {
        self.expiry_rounds as f64 * self.round_period(n.max(2))
    }
}

/// Local clock of one device: `local = offset + (1 + drift) * global`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset: f64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub fn local(&self, global: f64) -> f64 {
        self.offset + (1.0 + self.drift_ppm * 1e-6) * global
    }

    pub fn to_global_duration(&self, local: f64) -> f64 {
        local / (1.0 + self.drift_ppm * 1e-6)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTable {
    active: Vec<NodeId>,
    last_heard: BTreeMap<NodeId, f64>,
}

impl RoutingTable {
    pub fn with_self(id: NodeId) -> Self {
        Self {
            active: vec![id],
            last_heard: BTreeMap::new(),
        }
    }

    pub fn active(&self) -> &[NodeId] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.active.binary_search(&id).is_ok()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.active.binary_search(&id).ok()
    }

    pub fn initiator(&self) -> Option<NodeId> {
        self.active.first().copied()
    }

    pub fn last_heard(&self, id: NodeId) -> Option<f64> {
        self.last_heard.get(&id).copied()
    }

    /// Records that `id` was heard. Returns true if it was not yet in the table.
    pub fn observe(&mut self, id: NodeId, now: f64) -> bool {
        self.last_heard.insert(id, now);
        match self.active.binary_search(&id) {
            Ok(_) => false,
            Err(pos) => {
                self.active.insert(pos, id);
                true
            }
        }
    }

    /// Removes every tracked node not heard for longer than `max_age`.
    /// Entries without a `last_heard` record (the owner itself) never expire.
    pub fn expire(&mut self, now: f64, max_age: f64) -> Vec<NodeId> {
        let stale: Vec<NodeId> = self
            .last_heard
            .iter()
            .filter(|(_, &t)| now - t > max_age)
            .map(|(&id, _)| id)
            .collect();
        for id in &stale {
            self.last_heard.remove(id);
            if let Ok(pos) = self.active.binary_search(id) {
                self.active.remove(pos);
            }
        }
        stale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Initiator opens its next round.
    RoundStart,
    /// Responder transmits its slot in the given round.
    Reply(RoundId),
    Watchdog,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timer {
    pub at: f64,
    pub kind: TimerKind,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolEvent {
    MessageReceived(RangingMessage),
    TimerFired { kind: TimerKind, generation: u64 },
    Activate,
    Deactivate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub outgoing: Vec<RangingMessage>,
    pub estimates: Vec<RangeEstimate>,
    pub timers: Vec<Timer>,
    pub joined: Vec<NodeId>,
    pub left: Vec<NodeId>,
    pub invalid_tof: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct RoundContext {
    id: RoundId,
    /// Our own transmit time in this round (local clock).
    my_tx: Option<f64>,
    /// Messages heard this round, as (sender, our rx, sender tx).
    heard: Vec<EmbeddedTimestamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProtocolState {
    pub id: NodeId,
    pub params: ProtocolParams,
    pub clock: ClockModel,
    pub active: bool,
    pub role: Role,
    pub routing: RoutingTable,
    pub watchdog_deadline: f64,
    /// Delay between request reception and our reply in the current round.
    pub slot_delay: f64,
    generation: u64,
    watchdog_armed: bool,
    next_seq: u64,
    round: Option<RoundContext>,
}

impl NodeProtocolState {
    pub fn new(id: NodeId, params: ProtocolParams, clock: ClockModel) -> Self {
        Self {
            id,
            params,
            clock,
            active: false,
            role: Role::Initiator,
            routing: RoutingTable::with_self(id),
            watchdog_deadline: f64::INFINITY,
            slot_delay: 0.0,
            generation: 0,
            watchdog_armed: false,
            next_seq: 0,
            round: None,
        }
    }

    pub fn step(&mut self, event: ProtocolEvent, now: f64) -> StepOutput {
        let mut out = StepOutput::default();
        match event {
            ProtocolEvent::Activate => {
                self.active = true;
                self.reset(now, &mut out);
            }
            ProtocolEvent::Deactivate => {
                self.active = false;
                self.generation += 1;
                self.watchdog_armed = false;
                self.round = None;
            }
            ProtocolEvent::TimerFired { kind, generation } => {
                if self.active && generation == self.generation {
                    self.on_timer(kind, now, &mut out);
                }
            }
            ProtocolEvent::MessageReceived(msg) => {
                if self.active && msg.sender != self.id {
                    self.on_message(msg, now, &mut out);
                }
            }
        }
        out
    }

    fn reset(&mut self, now: f64, out: &mut StepOutput) {
        out.left.extend(self.routing.active().iter().copied().filter(|&n| n != self.id));
        self.role = Role::Initiator;
        self.routing = RoutingTable::with_self(self.id);
        self.generation += 1;
        self.watchdog_armed = false;
        self.watchdog_deadline = f64::INFINITY;
        self.slot_delay = 0.0;
        self.start_round(now, out);
    }

    fn start_round(&mut self, now: f64, out: &mut StepOutput) {
        let max_age = self.params.expiry_age(self.routing.len());
        out.left.extend(self.routing.expire(now, max_age));
        let id = RoundId {
            initiator: self.id,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        let tx = self.clock.local(now);
        self.round = Some(RoundContext {
            id,
            my_tx: Some(tx),
            heard: Vec::new(),
        });
        out.outgoing.push(RangingMessage {
            sender: self.id,
            kind: MessageKind::Request,
            tx_timestamp: tx,
            embedded_timestamps: Vec::new(),
            initiator: id.initiator,
            sequence: id.seq,
        });
        out.timers.push(Timer {
            at: now + self.params.round_period(self.routing.len()),
            kind: TimerKind::RoundStart,
            generation: self.generation,
        });
    }

    fn on_timer(&mut self, kind: TimerKind, now: f64, out: &mut StepOutput) {
        match kind {
            TimerKind::RoundStart => {
                if self.role == Role::Initiator {
                    self.start_round(now, out);
                }
            }
            TimerKind::Reply(round) => {
                if self.role != Role::Responder {
                    return;
                }
                let Some(ctx) = self.round.as_mut() else {
                    return;
                };
                if ctx.id != round || ctx.my_tx.is_some() {
                    return;
                }
                let tx = self.clock.local(now);
                ctx.my_tx = Some(tx);
                out.outgoing.push(RangingMessage {
                    sender: self.id,
                    kind: MessageKind::Reply,
                    tx_timestamp: tx,
                    embedded_timestamps: ctx.heard.clone(),
                    initiator: round.initiator,
                    sequence: round.seq,
                });
            }
            TimerKind::Watchdog => {
                self.watchdog_armed = false;
                if self.role != Role::Responder {
                    return;
                }
                if now >= self.watchdog_deadline {
                    self.reset(now, out);
                } else {
                    self.arm_watchdog(out);
                }
            }
        }
    }

    fn arm_watchdog(&mut self, out: &mut StepOutput) {
        if !self.watchdog_armed {
            self.watchdog_armed = true;
            out.timers.push(Timer {
                at: self.watchdog_deadline,
                kind: TimerKind::Watchdog,
                generation: self.generation,
            });
        }
    }

    fn on_message(&mut self, msg: RangingMessage, now: f64, out: &mut StepOutput) {
        let rx = self.clock.local(now);
        if self.routing.observe(msg.sender, now) {
            out.joined.push(msg.sender);
        }
        let from_smaller = msg.sender < self.id;
        if from_smaller && self.role == Role::Initiator {
            self.role = Role::Responder;
            self.generation += 1;
            self.watchdog_armed = false;
        }
        // Requests from larger IDs come from nodes that have not yet yielded; they
        // must not keep a responder alive when the real initiator is gone.
        let keeps_alive = from_smaller || msg.kind == MessageKind::Reply;
        if keeps_alive && self.role == Role::Responder {
            self.watchdog_deadline = now + self.params.watchdog;
            self.arm_watchdog(out);
        }

        let round = msg.round();
        if msg.kind == MessageKind::Request {
            if !from_smaller || self.role != Role::Responder {
                return;
            }
            let max_age = self.params.expiry_age(self.routing.len());
            out.left.extend(self.routing.expire(now, max_age));
            self.routing.observe(msg.sender, now);
            let slot = self.routing.position(self.id).unwrap_or(1).max(1);
            self.slot_delay = slot as f64 * self.params.t_msg;
            self.round = Some(RoundContext {
                id: round,
                my_tx: None,
                heard: vec![EmbeddedTimestamp {
                    node: msg.sender,
                    rx_timestamp: rx,
                    tx_timestamp: msg.tx_timestamp,
                }],
            });
            out.timers.push(Timer {
                at: now + self.slot_delay,
                kind: TimerKind::Reply(round),
                generation: self.generation,
            });
            return;
        }

        let Some(ctx) = self.round.as_mut() else {
            return;
        };
        if ctx.id != round {
            return;
        }
        ctx.heard.push(EmbeddedTimestamp {
            node: msg.sender,
            rx_timestamp: rx,
            tx_timestamp: msg.tx_timestamp,
        });
        let Some(my_tx) = ctx.my_tx else {
            return;
        };
        let Some(entry) = msg.embedded_timestamps.iter().find(|e| e.node == self.id) else {
            return;
        };
        match resolve_tof(my_tx, entry.rx_timestamp, msg.tx_timestamp, rx) {
            Ok(tof) => {
                let round_trip = self.clock.to_global_duration(rx - my_tx);
                let pair = if self.id < msg.sender {
                    (self.id, msg.sender)
                } else {
                    (msg.sender, self.id)
                };
                out.estimates.push(RangeEstimate {
                    pair,
                    tof,
                    distance_raw: SPEED_OF_LIGHT * tof,
                    timestamp: now - 0.5 * round_trip,
                    round,
                });
            }
            Err(_) => out.invalid_tof += 1,
        }
    }
}

/// Functional form of [`NodeProtocolState::step`].
pub fn step_node(
    state: &NodeProtocolState,
    event: ProtocolEvent,
    now: f64,
) -> (NodeProtocolState, StepOutput) {
    let mut next = state.clone();
    let out = next.step(event, now);
    (next, out)
}
