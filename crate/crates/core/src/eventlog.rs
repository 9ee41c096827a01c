//! JSON-lines event log shared by simulated runs and replays.
//!
//! Every record carries its timestamp `t` and the host arrival time `arrival`.
//! The first record of a log is a `meta` record with the full scenario so the
//! log alone is enough to reproduce the published layouts.

use std::io::{BufRead, Write};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{quat_from_wxyz, quat_to_wxyz, Vec3};
use crate::orientation::LocalEstimate;
use crate::pipeline::{NodePosition, PipelineEvent, TimedEvent};
use crate::protocol::{NodeId, RangeEstimate, RoundId, SPEED_OF_LIGHT};
use crate::sim::config::ScenarioConfig;

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log has no meta record")]
    MissingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Meta {
        t: f64,
        arrival: f64,
        config_hash: String,
        config: Box<ScenarioConfig>,
    },
    Imu {
        t: f64,
        arrival: f64,
        node: u32,
        accel: [f64; 3],
        gyro: [f64; 3],
        mag: [f64; 3],
    },
    LocalEstimate {
        t: f64,
        arrival: f64,
        node: u32,
        /// w, x, y, z
        q: [f64; 4],
        a: [f64; 3],
        /// Row-major.
        q_cov: [f64; 9],
        a_cov: [f64; 9],
    },
    Range {
        t: f64,
        arrival: f64,
        i: u32,
        j: u32,
        tof: f64,
        d_raw: f64,
        initiator: u32,
        seq: u64,
    },
    Join {
        t: f64,
        arrival: f64,
        node: u32,
    },
    Leave {
        t: f64,
        arrival: f64,
        node: u32,
    },
    Truth {
        t: f64,
        arrival: f64,
        positions: Vec<NodePosition>,
    },
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

impl LogRecord {
    pub fn t(&self) -> f64 {
        match self {
            Self::Meta { t, .. }
            | Self::Imu { t, .. }
            | Self::LocalEstimate { t, .. }
            | Self::Range { t, .. }
            | Self::Join { t, .. }
            | Self::Leave { t, .. }
            | Self::Truth { t, .. } => *t,
        }
    }

    pub fn arrival(&self) -> f64 {
        match self {
            Self::Meta { arrival, .. }
            | Self::Imu { arrival, .. }
            | Self::LocalEstimate { arrival, .. }
            | Self::Range { arrival, .. }
            | Self::Join { arrival, .. }
            | Self::Leave { arrival, .. }
            | Self::Truth { arrival, .. } => *arrival,
        }
    }

    pub fn local_estimate(node: NodeId, est: &LocalEstimate, arrival: f64) -> Self {
        Self::LocalEstimate {
            t: est.timestamp,
            arrival,
            node: node.0,
            q: quat_to_wxyz(&est.q_hat),
            a: [est.a_hat.x, est.a_hat.y, est.a_hat.z],
            q_cov: row_major(&est.q_cov),
            a_cov: row_major(&est.a_cov),
        }
    }

    pub fn range(r: &RangeEstimate, arrival: f64) -> Self {
        Self::Range {
            t: r.timestamp,
            arrival,
            i: r.pair.0 .0,
            j: r.pair.1 .0,
            tof: r.tof,
            d_raw: r.distance_raw,
            initiator: r.round.initiator.0,
            seq: r.round.seq,
        }
    }

    /// The pipeline input carried by this record, if any.
    pub fn to_event(&self) -> Option<TimedEvent> {
        let (t, arrival, event) = match self {
            Self::LocalEstimate {
                t,
                arrival,
                node,
                q,
                a,
                q_cov,
                a_cov,
            } => (
                *t,
                *arrival,
                PipelineEvent::Local {
                    node: NodeId(*node),
                    estimate: LocalEstimate {
                        timestamp: *t,
                        q_hat: quat_from_wxyz(q[0], q[1], q[2], q[3]),
                        a_hat: Vec3::from(*a),
                        q_cov: from_row_major(q_cov),
                        a_cov: from_row_major(a_cov),
                    },
                },
            ),
            Self::Range {
                t,
                arrival,
                i,
                j,
                tof,
                d_raw,
                initiator,
                seq,
            } => (
                *t,
                *arrival,
                PipelineEvent::Range(RangeEstimate {
                    pair: (NodeId(*i), NodeId(*j)),
                    tof: *tof,
                    distance_raw: *d_raw,
                    timestamp: *t,
                    round: RoundId {
                        initiator: NodeId(*initiator),
                        seq: *seq,
                    },
                }),
            ),
            Self::Join { t, arrival, node } => (*t, *arrival, PipelineEvent::Join(NodeId(*node))),
            Self::Leave { t, arrival, node } => (*t, *arrival, PipelineEvent::Leave(NodeId(*node))),
            _ => return None,
        };
        Some(TimedEvent { t, arrival, event })
    }
}

/// Consistency of a range record: `d_raw = c * tof`.
pub fn range_is_consistent(tof: f64, d_raw: f64) -> bool {
    (SPEED_OF_LIGHT * tof - d_raw).abs() <= 1e-9 * d_raw.abs().max(1.0)
}

pub fn write_jsonl<W: Write>(records: &[LogRecord], mut w: W) -> Result<(), EventLogError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<LogRecord>, EventLogError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line).map_err(|e| EventLogError::Malformed {
            line: k + 1,
            message: e.to_string(),
        })?;
        if let LogRecord::Range { tof, d_raw, .. } = &record {
            if !range_is_consistent(*tof, *d_raw) {
                return Err(EventLogError::Malformed {
                    line: k + 1,
                    message: "d_raw does not match tof".into(),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

/// The scenario embedded in the log's meta record.
pub fn meta_config(records: &[LogRecord]) -> Result<ScenarioConfig, EventLogError> {
    records
        .iter()
        .find_map(|r| match r {
            LogRecord::Meta { config, .. } => Some((**config).clone()),
            _ => None,
        })
        .ok_or(EventLogError::MissingMeta)
}
