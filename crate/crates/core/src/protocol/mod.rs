//! End-node, switch, and BSA state machines: cooperative bi-path BSA
//! selection, hop-by-hop circuit reservation with first-come-first-served
//! conflict resolution, resource release, and request queuing.
//!
//! All interaction is message passing. A node handler consumes one
//! input (message or timer) and returns the sends, timers, and log
//! events it produced; it never touches another node's state.

mod bsa;
mod end_node;
mod switch;

pub use bsa::BsaNode;
pub use end_node::{EndNode, EndNodeInput, QueuedRequest, Session};
pub(crate) use end_node::select_out_link;
pub use switch::SwitchNode;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::BsaTable;
use crate::eventlog::{EventKind, Timestamp};
use crate::topology::{NodeId, PortId};

/// Globally unique session identifier: the lead node plus a per-lead
/// serial number.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SessionId {
    pub lead: NodeId,
    pub serial: u64,
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lead, self.serial)
    }
}

/// Classical control-plane message taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MessageKind {
    /// Step 1: lead asks the peer for its BSA table.
    RequestBsaTable,
    /// Step 2: peer responds with its full table.
    BsaTableResponse(BsaTable),
    /// Step 3: lead announces the selected BSA and the input port the
    /// receiver must reserve toward.
    TargetSelection {
        session: SessionId,
        bsa: NodeId,
        port_for_receiver: PortId,
        candidate_rank: u32,
    },
    /// Step 4: follower acknowledges and thereby creates its session.
    TargetAck { session: SessionId },
    /// Step 5: hop-by-hop circuit reservation toward one BSA input
    /// port. `requester` names the end node whose path this is; one
    /// session has two of them.
    RouteReserveRequest {
        session: SessionId,
        bsa: NodeId,
        bsa_port: PortId,
        requester: NodeId,
    },
    /// Step 6: success, relayed back along the reserved path.
    RouteReserveAck { session: SessionId },
    /// Conflict: relayed back toward the path's end node; also used by
    /// an end node to notify its peer of the failure.
    RouteReserveReject {
        session: SessionId,
        rejecting_node: NodeId,
    },
    /// Frees a session's reservations hop by hop toward the BSA.
    ReleaseResources { session: SessionId },
    /// Step 7: reservation-complete exchange between the end nodes.
    ReservationComplete { session: SessionId },
    /// Step 8: lead proposes when the circuit becomes usable.
    ProposeStartTime {
        session: SessionId,
        start_time: Timestamp,
    },
    /// Step 9: follower accepts the start time.
    StartTimeAck { session: SessionId },
    /// The request cannot proceed and goes to a queue: sent by a busy
    /// peer answering step 1 (no session exists yet, hence the option),
    /// or by the lead abandoning a session that ran out of candidates.
    RequestQueuedNotice { session: Option<SessionId> },
}

impl MessageKind {
    /// Short name used in event logs.
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::RequestBsaTable => "RequestBsaTable",
            MessageKind::BsaTableResponse(_) => "BsaTableResponse",
            MessageKind::TargetSelection { .. } => "TargetSelection",
            MessageKind::TargetAck { .. } => "TargetAck",
            MessageKind::RouteReserveRequest { .. } => "RouteReserveRequest",
            MessageKind::RouteReserveAck { .. } => "RouteReserveAck",
            MessageKind::RouteReserveReject { .. } => "RouteReserveReject",
            MessageKind::ReleaseResources { .. } => "ReleaseResources",
            MessageKind::ReservationComplete { .. } => "ReservationComplete",
            MessageKind::ProposeStartTime { .. } => "ProposeStartTime",
            MessageKind::StartTimeAck { .. } => "StartTimeAck",
            MessageKind::RequestQueuedNotice { .. } => "RequestQueuedNotice",
        }
    }

    pub fn session(&self) -> Option<SessionId> {
        match self {
            MessageKind::RequestBsaTable | MessageKind::BsaTableResponse(_) => None,
            MessageKind::TargetSelection { session, .. }
            | MessageKind::TargetAck { session }
            | MessageKind::RouteReserveRequest { session, .. }
            | MessageKind::RouteReserveAck { session }
            | MessageKind::RouteReserveReject { session, .. }
            | MessageKind::ReleaseResources { session }
            | MessageKind::ReservationComplete { session }
            | MessageKind::ProposeStartTime { session, .. }
            | MessageKind::StartTimeAck { session } => Some(*session),
            MessageKind::RequestQueuedNotice { session } => *session,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: MessageKind,
}

/// Session lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    AwaitingPeerTable,
    Selecting,
    AwaitingTargetAck,
    Reserving,
    AwaitingPeerReservation,
    ReservationDone,
    AwaitingStartAck,
    Active,
    Queued,
    Failed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Lead,
    Follower,
}

/// One candidate of the merged BSA table: a BSA with a distinct input
/// port assigned to each end node, costed as the sum of both paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedBsaEntry {
    pub bsa: NodeId,
    pub port_for_lead: PortId,
    pub port_for_peer: PortId,
    pub combined_cost: u32,
}

/// Merges two BSA tables into the ordered candidate list. For every BSA
/// both sides reach, every port assignment with distinct ports becomes
/// a candidate; the list is sorted ascending by (combined cost, bsa id,
/// lead port).
pub fn merge_tables(lead_table: &BsaTable, peer_table: &BsaTable) -> Vec<MergedBsaEntry> {
    let mut peer_ports: std::collections::BTreeMap<NodeId, Vec<(PortId, u32)>> =
        std::collections::BTreeMap::new();
    for e in &peer_table.entries {
        peer_ports.entry(e.bsa).or_default().push((e.bsa_port, e.cost));
    }
    let mut out = Vec::new();
    for le in &lead_table.entries {
        for (peer_port, peer_cost) in peer_ports.get(&le.bsa).into_iter().flatten() {
            if *peer_port == le.bsa_port {
                continue;
            }
            out.push(MergedBsaEntry {
                bsa: le.bsa,
                port_for_lead: le.bsa_port,
                port_for_peer: *peer_port,
                combined_cost: le.cost + peer_cost,
            });
        }
    }
    out.sort_by_key(|e| (e.combined_cost, e.bsa, e.port_for_lead, e.port_for_peer));
    out
}

/// A port held for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortReservation {
    pub port: PortId,
    pub session: SessionId,
    pub reserved_at: Timestamp,
}

/// Protocol timing knobs shared by every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// How long a completed circuit stays allocated, standing in for
    /// entanglement generation time.
    pub session_hold: u64,
    /// Delay between proposing a start time and the circuit being
    /// usable.
    pub reconfiguration_delay: u64,
    /// Queued requests older than this are dropped at dequeue time.
    pub request_timeout: u64,
    /// Fixed delay between a node becoming free and the next queued
    /// request re-entering the protocol.
    pub dequeue_delay: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            session_hold: 10,
            reconfiguration_delay: 0,
            request_timeout: 10_000,
            dequeue_delay: 100,
        }
    }
}

/// Timers a node can ask the scheduler to fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimerKind {
    /// The hold period of an active session elapsed; tear it down.
    SessionEnd { session: SessionId },
    /// The fixed de-queue delay elapsed; try the head of the queue.
    DequeueReady,
}

/// Everything a handler can hand back to the scheduler.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Send(Message),
    Timer { at: Timestamp, kind: TimerKind },
    Event {
        session: Option<SessionId>,
        kind: EventKind,
    },
}

/// Hard protocol violations; the simulation aborts on these.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolViolation {
    #[error("node {node} asked to establish a link with itself")]
    SelfRequest { node: NodeId },
    #[error("reservation for BSA {expected} arrived at node {got}")]
    WrongBsa { expected: NodeId, got: NodeId },
    #[error("node {node}: {detail}")]
    CorruptState { node: NodeId, detail: String },
}
