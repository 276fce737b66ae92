//! Structured event log shared by the protocol, the simulator, and the
//! analytics module. One record per protocol message send/receive and
//! per state transition, dumpable as JSON lines. Logs are deterministic
//! given a config and seed, so two identical runs compare byte-equal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{SessionId, SessionState};
use crate::topology::NodeId;

/// Integer simulation time step.
pub type Timestamp = u64;

/// Why a request went to an end node's queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueReason {
    /// The would-be lead was already engaged in a session.
    LeadBusy,
    /// The peer answered the table request with a busy notice.
    PeerBusy,
    /// Every merged candidate was tried and rejected.
    CandidatesExhausted,
    /// The lead abandoned its own fresh request to serve an incoming
    /// one (deterministic tie-break for crossing requests).
    Yielded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    /// Traffic injected: `node` (the future lead) wants a link to `dst`.
    RequestArrived { dst: NodeId },
    MessageSent { msg: String, dst: NodeId },
    MessageReceived { msg: String, src: NodeId },
    StateTransition {
        from: Option<SessionState>,
        to: SessionState,
    },
    /// A candidate was popped and proposed to the peer.
    TargetSelected {
        rank: u32,
        bsa: NodeId,
        combined_cost: u32,
    },
    /// A reject was handled and the session moved on to reselection.
    Retry { rank: u32, rejecting_node: NodeId },
    RequestQueued {
        arrival: Timestamp,
        peer: NodeId,
        reason: QueueReason,
    },
    RequestDequeued { arrival: Timestamp, peer: NodeId },
    RequestExpired { arrival: Timestamp, peer: NodeId },
    /// The session went active at the lead; `time` is the completion
    /// instant, `arrival` the original request arrival.
    SessionActive {
        arrival: Timestamp,
        queued: bool,
        retries: u32,
        bsa: NodeId,
        peer: NodeId,
    },
    /// Hold period over; the circuit is being torn down.
    SessionEnded,
    /// Both input ports of a BSA are now held by one session.
    BsaSessionReady,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: Timestamp,
    pub node: NodeId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session: Option<SessionId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum MalformedLog {
    #[error("log line {line}: {source}")]
    BadLine {
        line: usize,
        source: serde_json::Error,
    },
}

/// Append-only event log of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LogRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<EventLog, MalformedLog> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line)
                .map_err(|source| MalformedLog::BadLine { line: idx + 1, source })?;
            records.push(record);
        }
        Ok(EventLog { records })
    }
}
