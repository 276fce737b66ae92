//! Turns event logs into the run metrics: request counts,
//! immediate-completion percentage, completion times with and without
//! queuing, retry counts, and cumulative sessions per BSA. Pure
//! functions over immutable logs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{compute_bsa_table, Lsdb};
use crate::eventlog::{EventKind, EventLog, Timestamp};
use crate::protocol::{merge_tables, SessionId};
use crate::simnet::{run, SimConfig};
use crate::topology::{NodeId, Topology};

/// Final fate of one link-establishment request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    /// Session that completed the request; absent when it expired
    /// before any activation got that far.
    pub session: Option<SessionId>,
    pub lead: NodeId,
    pub created_at: Timestamp,
    pub completed_at: Timestamp,
    pub queued: bool,
    /// Steps between arrival and the final de-queue; zero when the
    /// request never waited.
    pub queue_wait: Timestamp,
    pub retries: u32,
    pub bsa_used: Option<NodeId>,
    pub expired: bool,
}

/// Aggregate metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub requests: u64,
    pub completed: u64,
    pub expired: u64,
    /// Requests that never completed nor expired (cut off by the run's
    /// end); zero on a clean run.
    pub unresolved: u64,
    pub success_rate: f64,
    /// Fraction of requests that completed without ever being queued.
    pub immediate_completion_pct: f64,
    pub mean_completion_uncontested: Option<f64>,
    pub max_completion_uncontested: Option<u64>,
    pub mean_completion_queued: Option<f64>,
    pub max_completion_queued: Option<u64>,
    pub max_retries: u32,
    pub sessions_per_bsa: BTreeMap<NodeId, u64>,
}

#[derive(Debug, Error)]
pub enum MalformedLog {
    #[error("malformed log: {0}")]
    Inconsistent(String),
}

/// Reconstructs every request's outcome from the log.
pub fn session_outcomes(log: &EventLog) -> Result<Vec<SessionOutcome>, MalformedLog> {
    let mut arrivals: BTreeMap<(NodeId, Timestamp), NodeId> = BTreeMap::new();
    let mut dequeues: BTreeMap<(NodeId, Timestamp), Timestamp> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for record in log.iter() {
        match &record.kind {
            EventKind::RequestArrived { dst } => {
                arrivals.insert((record.node, record.time), *dst);
            }
            EventKind::RequestDequeued { arrival, .. } => {
                dequeues.insert((record.node, *arrival), record.time);
            }
            EventKind::SessionActive {
                arrival,
                queued,
                retries,
                bsa,
                ..
            } => {
                if !arrivals.contains_key(&(record.node, *arrival)) {
                    return Err(MalformedLog::Inconsistent(format!(
                        "completion at node {} references unknown request arrival {}",
                        record.node, arrival
                    )));
                }
                let queue_wait = if *queued {
                    let dequeued =
                        dequeues.get(&(record.node, *arrival)).ok_or_else(|| {
                            MalformedLog::Inconsistent(format!(
                                "queued completion at node {} has no de-queue record",
                                record.node
                            ))
                        })?;
                    dequeued - arrival
                } else {
                    0
                };
                outcomes.push(SessionOutcome {
                    session: record.session,
                    lead: record.node,
                    created_at: *arrival,
                    completed_at: record.time,
                    queued: *queued,
                    queue_wait,
                    retries: *retries,
                    bsa_used: Some(*bsa),
                    expired: false,
                });
            }
            EventKind::RequestExpired { arrival, .. } => {
                outcomes.push(SessionOutcome {
                    session: None,
                    lead: record.node,
                    created_at: *arrival,
                    completed_at: record.time,
                    queued: true,
                    queue_wait: record.time - arrival,
                    retries: 0,
                    bsa_used: None,
                    expired: true,
                });
            }
            _ => {}
        }
    }
    Ok(outcomes)
}

/// Computes the aggregate metrics of one completed run.
pub fn summarize(log: &EventLog) -> Result<RunSummary, MalformedLog> {
    let outcomes = session_outcomes(log)?;
    let requests = log
        .iter()
        .filter(|r| matches!(r.kind, EventKind::RequestArrived { .. }))
        .count() as u64;
    let completed = outcomes.iter().filter(|o| !o.expired).count() as u64;
    let expired = outcomes.iter().filter(|o| o.expired).count() as u64;
    if completed + expired > requests {
        return Err(MalformedLog::Inconsistent(format!(
            "{completed} completions + {expired} expiries exceed {requests} requests"
        )));
    }
    let immediate = outcomes.iter().filter(|o| !o.expired && !o.queued).count() as u64;

    let times = |queued: bool| -> Vec<u64> {
        outcomes
            .iter()
            .filter(|o| !o.expired && o.queued == queued)
            .map(|o| o.completed_at - o.created_at)
            .collect()
    };
    let mean = |v: &[u64]| {
        (!v.is_empty()).then(|| v.iter().sum::<u64>() as f64 / v.len() as f64)
    };
    let uncontested = times(false);
    let queued_times = times(true);

    let mut sessions_per_bsa: BTreeMap<NodeId, u64> = BTreeMap::new();
    for record in log.iter() {
        if matches!(record.kind, EventKind::BsaSessionReady) {
            *sessions_per_bsa.entry(record.node).or_default() += 1;
        }
    }

    Ok(RunSummary {
        requests,
        completed,
        expired,
        unresolved: requests - completed - expired,
        success_rate: if requests == 0 {
            1.0
        } else {
            completed as f64 / requests as f64
        },
        immediate_completion_pct: if requests == 0 {
            1.0
        } else {
            immediate as f64 / requests as f64
        },
        mean_completion_uncontested: mean(&uncontested),
        max_completion_uncontested: uncontested.iter().max().copied(),
        mean_completion_queued: mean(&queued_times),
        max_completion_queued: queued_times.iter().max().copied(),
        max_retries: outcomes.iter().map(|o| o.retries).max().unwrap_or(0),
        sessions_per_bsa,
    })
}

/// Fastest possible completion for a pair under the per-message delay
/// model: four handshake legs, the slower path's reservation round
/// trip, then the completion/propose/ack tail.
pub fn min_completion_steps(
    topo: &Topology,
    lead: NodeId,
    peer: NodeId,
    hop_latency: u64,
) -> Option<u64> {
    let lsdb = Lsdb::from_topology(topo);
    let lead_table = compute_bsa_table(&lsdb, lead);
    let peer_table = compute_bsa_table(&lsdb, peer);
    let candidates = merge_tables(&lead_table, &peer_table);
    let best = candidates
        .iter()
        .map(|c| {
            let lead_cost = lead_table.entry(c.bsa, c.port_for_lead).unwrap().cost as u64;
            let peer_cost = peer_table.entry(c.bsa, c.port_for_peer).unwrap().cost as u64;
            lead_cost.max(peer_cost)
        })
        .min()?;
    Some(hop_latency * (6 + 2 * best))
}

/// One row of a parameter sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub topology: String,
    pub lambda: u64,
    pub seed: u64,
    pub result: Result<RunSummary, String>,
}

/// Runs every config and tabulates the results; failures land in their
/// row instead of aborting the sweep.
pub fn sweep(configs: &[SimConfig]) -> Vec<SweepRow> {
    configs
        .iter()
        .map(|config| {
            let (topology, result) = match run(config) {
                Ok(output) => {
                    let name = output.topology_name.clone();
                    match summarize(&output.log) {
                        Ok(summary) => (name, Ok(summary)),
                        Err(e) => (name, Err(e.to_string())),
                    }
                }
                Err(e) => ("?".to_string(), Err(e.to_string())),
            };
            SweepRow {
                topology,
                lambda: config.lambda,
                seed: config.seed,
                result,
            }
        })
        .collect()
}

/// CSV suitable for plotting immediate completion against lambda.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "topology,lambda,seed,requests,success_rate,immediate_pct,mean_comp,mean_comp_queued,max_retries,expired\n",
    );
    for row in rows {
        match &row.result {
            Ok(s) => {
                let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{:.4},{:.4},{},{},{},{}\n",
                    row.topology,
                    row.lambda,
                    row.seed,
                    s.requests,
                    s.success_rate,
                    s.immediate_completion_pct,
                    fmt_opt(s.mean_completion_uncontested),
                    fmt_opt(s.mean_completion_queued),
                    s.max_retries,
                    s.expired,
                ));
            }
            Err(_) => {
                out.push_str(&format!(
                    "{},{},{},,,,,,,\n",
                    row.topology, row.lambda, row.seed
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::LogRecord;
    use crate::topology::testdata::fig5;

    fn record(time: Timestamp, node: NodeId, kind: EventKind) -> LogRecord {
        LogRecord {
            time,
            node,
            session: None,
            kind,
        }
    }

    #[test]
    fn single_uncontested_session_is_fully_immediate() {
        let mut log = EventLog::default();
        log.push(record(10, NodeId(3), EventKind::RequestArrived { dst: NodeId(4) }));
        log.push(record(
            22,
            NodeId(3),
            EventKind::SessionActive {
                arrival: 10,
                queued: false,
                retries: 0,
                bsa: NodeId(2),
                peer: NodeId(4),
            },
        ));
        let summary = summarize(&log).unwrap();
        assert_eq!(summary.requests, 1);
        assert_eq!(summary.immediate_completion_pct, 1.0);
        assert_eq!(summary.success_rate, 1.0);
        assert_eq!(summary.mean_completion_uncontested, Some(12.0));
        assert_eq!(summary.mean_completion_queued, None);
    }

    #[test]
    fn queued_completion_needs_a_dequeue_record() {
        let mut log = EventLog::default();
        log.push(record(10, NodeId(3), EventKind::RequestArrived { dst: NodeId(4) }));
        log.push(record(
            150,
            NodeId(3),
            EventKind::SessionActive {
                arrival: 10,
                queued: true,
                retries: 0,
                bsa: NodeId(2),
                peer: NodeId(4),
            },
        ));
        assert!(summarize(&log).is_err());
        // With the de-queue record the wait is measurable.
        let mut log2 = EventLog::default();
        log2.push(record(10, NodeId(3), EventKind::RequestArrived { dst: NodeId(4) }));
        log2.push(record(
            138,
            NodeId(3),
            EventKind::RequestDequeued {
                arrival: 10,
                peer: NodeId(4),
            },
        ));
        log2.push(record(
            150,
            NodeId(3),
            EventKind::SessionActive {
                arrival: 10,
                queued: true,
                retries: 1,
                bsa: NodeId(2),
                peer: NodeId(4),
            },
        ));
        let outcomes = session_outcomes(&log2).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].queue_wait, 128);
        let summary = summarize(&log2).unwrap();
        assert_eq!(summary.immediate_completion_pct, 0.0);
        assert_eq!(summary.mean_completion_queued, Some(140.0));
        assert_eq!(summary.max_retries, 1);
    }

    #[test]
    fn completion_without_arrival_is_malformed() {
        let mut log = EventLog::default();
        log.push(record(
            22,
            NodeId(3),
            EventKind::SessionActive {
                arrival: 10,
                queued: false,
                retries: 0,
                bsa: NodeId(2),
                peer: NodeId(4),
            },
        ));
        assert!(summarize(&log).is_err());
    }

    #[test]
    fn conservation_counts_expiries() {
        let mut log = EventLog::default();
        log.push(record(10, NodeId(3), EventKind::RequestArrived { dst: NodeId(4) }));
        log.push(record(
            9_000,
            NodeId(3),
            EventKind::RequestExpired {
                arrival: 10,
                peer: NodeId(4),
            },
        ));
        let summary = summarize(&log).unwrap();
        assert_eq!(summary.expired, 1);
        assert_eq!(summary.completed, 0);
        assert_eq!(summary.unresolved, 0);
        assert_eq!(summary.success_rate, 0.0);
    }

    #[test]
    fn min_completion_bound_on_fig5() {
        let topo = fig5();
        // Lead two hops from the BSA, peer three: 6 + 2*3 = 12 steps.
        assert_eq!(
            min_completion_steps(&topo, NodeId(3), NodeId(4), 1),
            Some(12)
        );
    }
}
