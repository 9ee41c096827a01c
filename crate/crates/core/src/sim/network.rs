//! Discrete-event delivery of ranging messages between protocol state machines.
//!
//! Messages travel with a delay of path length over the speed of light; the
//! path length comes from a [`Channel`], which is where ranging error enters.
//! A host listener hears every transmission and derives join/leave events for
//! the tracking pipeline from its own routing table.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::protocol::{
    ClockModel, MessageKind, NodeId, NodeProtocolState, ProtocolEvent, ProtocolParams, RangeEstimate,
    RoundId, RoutingTable, SPEED_OF_LIGHT,
};

pub trait Channel {
    /// Effective path length of a message from `from` to `to` sent at `t`, m.
    fn path_length(&mut self, from: NodeId, to: NodeId, round: RoundId, t: f64) -> f64;

    /// Whether the receiver misses this message.
    fn drops(&mut self, _from: NodeId, _to: NodeId) -> bool {
        false
    }
}

/// Static geometry without noise or loss.
#[derive(Debug, Clone, Default)]
pub struct FixedChannel {
    pub positions: BTreeMap<NodeId, Vec3>,
}

impl Channel for FixedChannel {
    fn path_length(&mut self, from: NodeId, to: NodeId, _round: RoundId, _t: f64) -> f64 {
        match (self.positions.get(&from), self.positions.get(&to)) {
            (Some(a), Some(b)) => (a - b).norm(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Range { estimate: RangeEstimate, emitted_at: f64 },
    Join { node: NodeId, t: f64 },
    Leave { node: NodeId, t: f64 },
    Transmit { node: NodeId, kind: MessageKind, round: RoundId, t: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub messages: u64,
    pub deliveries: u64,
    pub dropped: u64,
    pub invalid_tof: u64,
}

#[derive(Debug, Clone)]
struct Queued {
    t: f64,
    seq: u64,
    node: NodeId,
    event: ProtocolEvent,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.seq.cmp(&other.seq))
    }
}

pub struct NetworkSim<C: Channel> {
    pub channel: C,
    params: ProtocolParams,
    nodes: BTreeMap<NodeId, NodeProtocolState>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: f64,
    host: RoutingTable,
    pub stats: NetStats,
    pub record_transmissions: bool,
}

impl<C: Channel> NetworkSim<C> {
    pub fn new(params: ProtocolParams, channel: C) -> Self {
        Self {
            channel,
            params,
            nodes: BTreeMap::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            host: RoutingTable::default(),
            stats: NetStats::default(),
            record_transmissions: false,
        }
    }

    pub fn add_node(&mut self, id: NodeId, clock: ClockModel) {
        self.nodes.insert(id, NodeProtocolState::new(id, self.params, clock));
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeProtocolState> {
        self.nodes.get(&id)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Nodes the host currently considers present.
    pub fn host_view(&self) -> &[NodeId] {
        self.host.active()
    }

    pub fn schedule_activation(&mut self, id: NodeId, t: f64) {
        self.push(t, id, ProtocolEvent::Activate);
    }

    pub fn schedule_deactivation(&mut self, id: NodeId, t: f64) {
        self.push(t, id, ProtocolEvent::Deactivate);
    }

    fn push(&mut self, t: f64, node: NodeId, event: ProtocolEvent) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            t,
            seq: self.seq,
            node,
            event,
        }));
    }

    /// Processes every queued event with time `<= t_end`.
    pub fn run_until(&mut self, t_end: f64, out: &mut Vec<NetEvent>) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.t > t_end {
                break;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.t;
            self.dispatch(q, out);
            self.expire_host(out);
        }
        self.now = self.now.max(t_end);
        self.expire_host(out);
    }

    fn expire_host(&mut self, out: &mut Vec<NetEvent>) {
        let age = self.params.expiry_age(self.host.len());
        for node in self.host.expire(self.now, age) {
            out.push(NetEvent::Leave { node, t: self.now });
        }
    }

    fn dispatch(&mut self, q: Queued, out: &mut Vec<NetEvent>) {
        let Some(state) = self.nodes.get_mut(&q.node) else {
            return;
        };
        let step = state.step(q.event, q.t);
        self.stats.invalid_tof += step.invalid_tof as u64;
        for estimate in step.estimates {
            out.push(NetEvent::Range {
                estimate,
                emitted_at: q.t,
            });
        }
        for timer in step.timers {
            self.push(
                timer.at,
                q.node,
                ProtocolEvent::TimerFired {
                    kind: timer.kind,
                    generation: timer.generation,
                },
            );
        }
        let receivers: Vec<NodeId> = self.nodes.keys().copied().filter(|&id| id != q.node).collect();
        for msg in step.outgoing {
            self.stats.messages += 1;
            if self.host.observe(msg.sender, q.t) {
                out.push(NetEvent::Join {
                    node: msg.sender,
                    t: q.t,
                });
            }
            if self.record_transmissions {
                out.push(NetEvent::Transmit {
                    node: msg.sender,
                    kind: msg.kind,
                    round: msg.round(),
                    t: q.t,
                });
            }
            for &to in &receivers {
                if self.channel.drops(msg.sender, to) {
                    self.stats.dropped += 1;
                    continue;
                }
                self.stats.deliveries += 1;
                let delay = self.channel.path_length(msg.sender, to, msg.round(), q.t) / SPEED_OF_LIGHT;
                self.push(q.t + delay.max(0.0), to, ProtocolEvent::MessageReceived(msg.clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Role;

    fn line_sim(n: u32, spacing: f64) -> NetworkSim<FixedChannel> {
        let positions = (0..n)
            .map(|k| (NodeId(k), Vec3::new(k as f64 * spacing, 0.0, 0.0)))
            .collect();
        let mut sim = NetworkSim::new(ProtocolParams::default(), FixedChannel { positions });
        for k in 0..n {
            sim.add_node(
                NodeId(k),
                ClockModel {
                    offset: 0.37 * k as f64 - 0.5,
                    drift_ppm: 0.0,
                },
            );
            sim.schedule_activation(NodeId(k), 0.001 * k as f64);
        }
        sim
    }

    #[test]
    fn three_nodes_converge_and_range_every_pair() {
        let mut sim = line_sim(3, 1.5);
        let mut out = Vec::new();
        sim.run_until(0.5, &mut out);
        assert_eq!(sim.node(NodeId(0)).unwrap().role, Role::Initiator);
        assert_eq!(sim.node(NodeId(1)).unwrap().role, Role::Responder);
        assert_eq!(sim.node(NodeId(2)).unwrap().role, Role::Responder);
        let mut by_round: BTreeMap<RoundId, Vec<RangeEstimate>> = BTreeMap::new();
        for e in &out {
            if let NetEvent::Range { estimate, .. } = e {
                by_round.entry(estimate.round).or_default().push(*estimate);
            }
        }
        let complete = by_round.values().filter(|v| v.len() == 3).count();
        assert!(complete > 30);
        for est in by_round.values().flatten() {
            let truth = (est.pair.1 .0 as f64 - est.pair.0 .0 as f64) * 1.5;
            assert!((est.distance_raw - truth).abs() < 1e-5, "{est:?}");
            assert!((est.tof - truth / SPEED_OF_LIGHT).abs() < 2e-15 * 100.0);
        }
    }

    #[test]
    fn host_sees_joins() {
        let mut sim = line_sim(4, 1.0);
        let mut out = Vec::new();
        sim.run_until(0.2, &mut out);
        let joins: Vec<NodeId> = out
            .iter()
            .filter_map(|e| match e {
                NetEvent::Join { node, .. } => Some(*node),
                _ => None,
            })
            .collect();
        assert_eq!(joins, (0..4).map(NodeId).collect::<Vec<_>>());
        assert_eq!(sim.host_view().len(), 4);
    }
}
