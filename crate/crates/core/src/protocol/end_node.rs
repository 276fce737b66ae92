//! Quantum end-node state machine: initiates requests as lead, answers
//! them as follower, reserves its half of the bi-path, and queues
//! requests it cannot serve right away.

use std::collections::BTreeMap;

use crate::discovery::BsaTable;
use crate::eventlog::{EventKind, QueueReason, Timestamp};
use crate::topology::{LinkDirection, NeighborLink, NodeId, PortId};

use super::{
    merge_tables, Message, MessageKind, MergedBsaEntry, Output, PortReservation, ProtocolConfig,
    ProtocolViolation, Role, SessionId, SessionState, TimerKind,
};

/// Inputs an end node reacts to.
#[derive(Debug, Clone)]
pub enum EndNodeInput {
    /// A fresh link-establishment request toward `dst` arrived here.
    NewRequest { dst: NodeId },
    Message(Message),
    Timer(TimerKind),
}

/// What the node is currently committed to. An engaged node answers new
/// table requests with a busy notice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Engagement {
    Lead(SessionId),
    /// Sent our table to `lead`, waiting for its target selection.
    FollowerPending { lead: NodeId },
    Follower(SessionId),
}

/// A request waiting in the node's FIFO queue, keyed by its original
/// arrival time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedRequest {
    pub arrival: Timestamp,
    pub peer: NodeId,
    pub timeout_at: Timestamp,
    /// Retries spent in earlier activations of this request.
    pub carried_retries: u32,
    seq: u64,
}

/// The candidate currently being reserved.
#[derive(Debug, Clone, Copy)]
struct Attempt {
    bsa: NodeId,
    own_bsa_port: PortId,
    rank: u32,
    next_hop: NodeId,
    /// Local port reserved for this path once reservation began.
    out_port: Option<PortId>,
}

/// Lifecycle record of one link-establishment activation at this node.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: SessionId,
    pub role: Role,
    pub peer: NodeId,
    pub state: SessionState,
    /// Ordered merged candidates; lead only.
    pub candidates: Vec<MergedBsaEntry>,
    /// Index of the next candidate to pop.
    pub current_candidate: usize,
    /// Reject-triggered reselections in this activation.
    pub retries: u32,
    /// Original request arrival (survives queuing).
    pub created_at: Timestamp,
    pub completed_at: Option<Timestamp>,
    pub dequeued_at: Option<Timestamp>,
    pub timeout_at: Timestamp,
    attempt: Option<Attempt>,
    own_reserved: bool,
    peer_reserved: bool,
    /// A route reservation request is in flight and its ack/reject has
    /// not come back yet. A path is never released while this is set;
    /// releasing behind a live request would let the response cross the
    /// release and be mistaken for the next attempt's.
    response_outstanding: bool,
    /// The peer reported failure while our own response was still in
    /// flight; settle (release and move on) when it arrives.
    doomed: bool,
    /// Node that caused the doom, for the retry log record.
    doomed_by: Option<NodeId>,
    /// The lead abandoned the session (queued the request); tear down
    /// when the outstanding response settles.
    abandon_on_settle: bool,
    /// New target that arrived while the previous attempt was still
    /// settling (follower only).
    stashed_target: Option<(NodeId, PortId, u32)>,
    proposed_start: Option<Timestamp>,
    was_queued: bool,
    carried_retries: u32,
}

impl Session {
    /// Total retries including earlier activations of the same request.
    pub fn total_retries(&self) -> u32 {
        self.carried_retries + self.retries
    }

    pub fn current_attempt_rank(&self) -> Option<u32> {
        self.attempt.as_ref().map(|a| a.rank)
    }
}

#[derive(Debug, Clone)]
pub struct EndNode {
    id: NodeId,
    config: ProtocolConfig,
    adjacency: Vec<NeighborLink>,
    table: Option<BsaTable>,
    next_serial: u64,
    engagement: Option<Engagement>,
    sessions: BTreeMap<SessionId, Session>,
    queue: Vec<QueuedRequest>,
    queue_seq: u64,
    dequeue_armed: bool,
    reservations: BTreeMap<PortId, PortReservation>,
}

/// Output accumulator; keeps handler bodies readable.
struct Out {
    node: NodeId,
    items: Vec<Output>,
}

impl Out {
    fn new(node: NodeId) -> Self {
        Out {
            node,
            items: Vec::new(),
        }
    }

    fn send(&mut self, dst: NodeId, kind: MessageKind) {
        self.items.push(Output::Send(Message {
            src: self.node,
            dst,
            kind,
        }));
    }

    fn timer(&mut self, at: Timestamp, kind: TimerKind) {
        self.items.push(Output::Timer { at, kind });
    }

    fn event(&mut self, session: Option<SessionId>, kind: EventKind) {
        self.items.push(Output::Event { session, kind });
    }

    fn transition(&mut self, session: SessionId, from: Option<SessionState>, to: SessionState) {
        self.event(Some(session), EventKind::StateTransition { from, to });
    }
}

impl EndNode {
    pub fn new(id: NodeId, config: ProtocolConfig, adjacency: Vec<NeighborLink>) -> Self {
        EndNode {
            id,
            config,
            adjacency,
            table: None,
            next_serial: 0,
            engagement: None,
            sessions: BTreeMap::new(),
            queue: Vec::new(),
            queue_seq: 0,
            dequeue_armed: false,
            reservations: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn set_table(&mut self, table: BsaTable) {
        self.table = Some(table);
    }

    pub fn table(&self) -> Option<&BsaTable> {
        self.table.as_ref()
    }

    pub fn is_engaged(&self) -> bool {
        self.engagement.is_some()
    }

    pub fn reservations(&self) -> impl Iterator<Item = &PortReservation> {
        self.reservations.values()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn queued(&self) -> &[QueuedRequest] {
        &self.queue
    }

    /// True when the node still owes somebody progress: a live session,
    /// or queued work.
    pub fn has_pending_work(&self) -> bool {
        !self.sessions.is_empty() || !self.queue.is_empty()
    }

    pub fn handle(
        &mut self,
        input: EndNodeInput,
        now: Timestamp,
    ) -> Result<Vec<Output>, ProtocolViolation> {
        let mut out = Out::new(self.id);
        match input {
            EndNodeInput::NewRequest { dst } => self.on_new_request(dst, now, &mut out)?,
            EndNodeInput::Timer(TimerKind::DequeueReady) => self.on_dequeue_timer(now, &mut out),
            EndNodeInput::Timer(TimerKind::SessionEnd { session }) => {
                self.on_session_end(session, now, &mut out)
            }
            EndNodeInput::Message(msg) => self.on_message(msg, now, &mut out)?,
        }
        Ok(out.items)
    }

    // ---- request intake and queuing ------------------------------------

    fn on_new_request(
        &mut self,
        dst: NodeId,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        if dst == self.id {
            return Err(ProtocolViolation::SelfRequest { node: self.id });
        }
        if self.engagement.is_some() || !self.queue.is_empty() {
            self.enqueue(
                QueuedRequest {
                    arrival: now,
                    peer: dst,
                    timeout_at: now + self.config.request_timeout,
                    carried_retries: 0,
                    seq: 0,
                },
                QueueReason::LeadBusy,
                None,
                now,
                out,
            );
            return Ok(());
        }
        self.start_attempt(dst, now, now + self.config.request_timeout, 0, false, None, now, out);
        Ok(())
    }

    fn enqueue(
        &mut self,
        mut request: QueuedRequest,
        reason: QueueReason,
        session: Option<SessionId>,
        now: Timestamp,
        out: &mut Out,
    ) {
        request.seq = self.queue_seq;
        self.queue_seq += 1;
        out.event(
            session,
            EventKind::RequestQueued {
                arrival: request.arrival,
                peer: request.peer,
                reason,
            },
        );
        self.queue.push(request);
        self.queue.sort_by_key(|q| (q.arrival, q.seq));
        self.maybe_arm_dequeue(now, out);
    }

    /// Keeps the invariant: a free node with queued work always has a
    /// de-queue timer pending.
    fn maybe_arm_dequeue(&mut self, now: Timestamp, out: &mut Out) {
        if self.engagement.is_none() && !self.queue.is_empty() && !self.dequeue_armed {
            self.dequeue_armed = true;
            out.timer(now + self.config.dequeue_delay, TimerKind::DequeueReady);
        }
    }

    fn on_dequeue_timer(&mut self, now: Timestamp, out: &mut Out) {
        self.dequeue_armed = false;
        if self.engagement.is_some() {
            // Something else engaged us meanwhile; the next disengage
            // re-arms the timer.
            return;
        }
        while !self.queue.is_empty() {
            let request = self.queue.remove(0);
            if request.timeout_at < now {
                out.event(
                    None,
                    EventKind::RequestExpired {
                        arrival: request.arrival,
                        peer: request.peer,
                    },
                );
                continue;
            }
            out.event(
                None,
                EventKind::RequestDequeued {
                    arrival: request.arrival,
                    peer: request.peer,
                },
            );
            self.start_attempt(
                request.peer,
                request.arrival,
                request.timeout_at,
                request.carried_retries,
                true,
                Some(now),
                now,
                out,
            );
            return;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn start_attempt(
        &mut self,
        peer: NodeId,
        arrival: Timestamp,
        timeout_at: Timestamp,
        carried_retries: u32,
        was_queued: bool,
        dequeued_at: Option<Timestamp>,
        _now: Timestamp,
        out: &mut Out,
    ) {
        debug_assert!(self.engagement.is_none());
        let id = SessionId {
            lead: self.id,
            serial: self.next_serial,
        };
        self.next_serial += 1;
        let session = Session {
            id,
            role: Role::Lead,
            peer,
            state: SessionState::AwaitingPeerTable,
            candidates: Vec::new(),
            current_candidate: 0,
            retries: 0,
            created_at: arrival,
            completed_at: None,
            dequeued_at,
            timeout_at,
            attempt: None,
            own_reserved: false,
            peer_reserved: false,
            response_outstanding: false,
            doomed: false,
            doomed_by: None,
            abandon_on_settle: false,
            stashed_target: None,
            proposed_start: None,
            was_queued,
            carried_retries,
        };
        self.sessions.insert(id, session);
        self.engagement = Some(Engagement::Lead(id));
        out.transition(id, None, SessionState::AwaitingPeerTable);
        out.send(peer, MessageKind::RequestBsaTable);
    }

    // ---- message dispatch ----------------------------------------------

    fn on_message(
        &mut self,
        msg: Message,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        match msg.kind.clone() {
            MessageKind::RequestBsaTable => self.on_request_bsa_table(msg.src, now, out),
            MessageKind::BsaTableResponse(table) => {
                self.on_bsa_table_response(msg.src, table, now, out)
            }
            MessageKind::TargetSelection {
                session,
                bsa,
                port_for_receiver,
                candidate_rank,
            } => {
                return self.on_target_selection(
                    msg.src,
                    session,
                    bsa,
                    port_for_receiver,
                    candidate_rank,
                    now,
                    out,
                );
            }
            MessageKind::TargetAck { session } => self.on_target_ack(msg.src, session, now, out),
            MessageKind::RouteReserveAck { session } => {
                return self.on_route_reserve_ack(msg.src, session, now, out);
            }
            MessageKind::RouteReserveReject {
                session,
                rejecting_node,
            } => {
                return self.on_route_reserve_reject(msg.src, session, rejecting_node, now, out);
            }
            MessageKind::ReservationComplete { session } => {
                self.on_reservation_complete(session, now, out)
            }
            MessageKind::ProposeStartTime {
                session,
                start_time,
            } => self.on_propose_start_time(session, start_time, now, out),
            MessageKind::StartTimeAck { session } => self.on_start_time_ack(session, now, out),
            MessageKind::RequestQueuedNotice { session } => {
                self.on_request_queued_notice(msg.src, session, now, out)
            }
            MessageKind::RouteReserveRequest { .. } | MessageKind::ReleaseResources { .. } => {
                // Paths never transit an end node; nothing to do.
            }
        }
        Ok(())
    }

    fn on_request_bsa_table(&mut self, src: NodeId, now: Timestamp, out: &mut Out) {
        match self.engagement {
            None => {
                if let Some(table) = self.table.clone() {
                    self.engagement = Some(Engagement::FollowerPending { lead: src });
                    out.send(src, MessageKind::BsaTableResponse(table));
                } else {
                    out.send(src, MessageKind::RequestQueuedNotice { session: None });
                }
            }
            Some(Engagement::Lead(sid))
                if src < self.id
                    && self
                        .sessions
                        .get(&sid)
                        .map(|s| s.state == SessionState::AwaitingPeerTable)
                        .unwrap_or(false) =>
            {
                // Crossing requests: the lower node id wins and we turn
                // follower, re-queuing our own fresh attempt. Without a
                // deterministic tie-break two nodes requesting each
                // other would bounce busy notices forever.
                let session = self.sessions.remove(&sid).expect("session checked above");
                out.transition(sid, Some(session.state), SessionState::Queued);
                if session.peer != src {
                    // Our pending peer may already have answered; let it go.
                    out.send(
                        session.peer,
                        MessageKind::RequestQueuedNotice { session: Some(sid) },
                    );
                }
                self.engagement = None;
                self.enqueue(
                    QueuedRequest {
                        arrival: session.created_at,
                        peer: session.peer,
                        timeout_at: session.timeout_at,
                        carried_retries: session.total_retries(),
                        seq: 0,
                    },
                    QueueReason::Yielded,
                    Some(sid),
                    now,
                    out,
                );
                let table = self.table.clone().expect("tables exist after discovery");
                self.engagement = Some(Engagement::FollowerPending { lead: src });
                out.send(src, MessageKind::BsaTableResponse(table));
            }
            Some(_) => {
                out.send(src, MessageKind::RequestQueuedNotice { session: None });
            }
        }
    }

    fn on_bsa_table_response(
        &mut self,
        src: NodeId,
        peer_table: BsaTable,
        now: Timestamp,
        out: &mut Out,
    ) {
        let Some(Engagement::Lead(sid)) = self.engagement else {
            // Stale response for an attempt we abandoned; release the
            // sender, which pre-engaged itself when answering.
            out.send(src, MessageKind::RequestQueuedNotice { session: None });
            return;
        };
        let session = self.sessions.get_mut(&sid).expect("lead session exists");
        if session.peer != src || session.state != SessionState::AwaitingPeerTable {
            out.send(src, MessageKind::RequestQueuedNotice { session: None });
            return;
        }
        let own_table = self.table.as_ref().expect("tables exist after discovery");
        session.candidates = merge_tables(own_table, &peer_table);
        session.state = SessionState::Selecting;
        out.transition(sid, Some(SessionState::AwaitingPeerTable), SessionState::Selecting);
        self.select_and_propose(sid, None, now, out);
    }

    /// Pops the cheapest remaining candidate and proposes it to the
    /// peer; with the list exhausted the request goes back to the
    /// queue. `blocked_bsa` names a BSA that just rejected us: another
    /// session holds one of its input ports, which dooms every port
    /// assignment of that BSA, so the head run of candidates on it is
    /// skipped (the next distinct BSA is popped instead).
    fn select_and_propose(
        &mut self,
        sid: SessionId,
        blocked_bsa: Option<NodeId>,
        now: Timestamp,
        out: &mut Out,
    ) {
        let session = self.sessions.get_mut(&sid).expect("session exists");
        debug_assert_eq!(session.state, SessionState::Selecting);
        if let Some(blocked) = blocked_bsa {
            while session
                .candidates
                .get(session.current_candidate)
                .is_some_and(|c| c.bsa == blocked)
            {
                session.current_candidate += 1;
            }
        }
        if session.current_candidate >= session.candidates.len() {
            self.queue_request_from_session(sid, QueueReason::CandidatesExhausted, now, out);
            return;
        }
        let rank = session.current_candidate as u32;
        let candidate = session.candidates[session.current_candidate];
        session.current_candidate += 1;
        session.attempt = Some(Attempt {
            bsa: candidate.bsa,
            own_bsa_port: candidate.port_for_lead,
            rank,
            next_hop: NodeId(0), // resolved when reservation begins
            out_port: None,
        });
        session.own_reserved = false;
        session.peer_reserved = false;
        session.response_outstanding = false;
        session.doomed = false;
        session.doomed_by = None;
        session.state = SessionState::AwaitingTargetAck;
        let peer = session.peer;
        out.event(
            Some(sid),
            EventKind::TargetSelected {
                rank,
                bsa: candidate.bsa,
                combined_cost: candidate.combined_cost,
            },
        );
        out.transition(sid, Some(SessionState::Selecting), SessionState::AwaitingTargetAck);
        out.send(
            peer,
            MessageKind::TargetSelection {
                session: sid,
                bsa: candidate.bsa,
                port_for_receiver: candidate.port_for_peer,
                candidate_rank: rank,
            },
        );
    }

    /// Abandons the session and parks the request in the queue.
    fn queue_request_from_session(
        &mut self,
        sid: SessionId,
        reason: QueueReason,
        now: Timestamp,
        out: &mut Out,
    ) {
        let mut session = self.sessions.remove(&sid).expect("session exists");
        self.release_own_path(&mut session, now, out);
        out.transition(sid, Some(session.state), SessionState::Queued);
        if reason == QueueReason::CandidatesExhausted {
            out.send(
                session.peer,
                MessageKind::RequestQueuedNotice { session: Some(sid) },
            );
        }
        self.engagement = None;
        self.enqueue(
            QueuedRequest {
                arrival: session.created_at,
                peer: session.peer,
                timeout_at: session.timeout_at,
                carried_retries: session.total_retries(),
                seq: 0,
            },
            reason,
            Some(sid),
            now,
            out,
        );
    }

    // ---- follower side ---------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn on_target_selection(
        &mut self,
        src: NodeId,
        sid: SessionId,
        bsa: NodeId,
        own_port: PortId,
        rank: u32,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        match self.engagement {
            Some(Engagement::FollowerPending { lead }) if lead == src => {
                let session = Session {
                    id: sid,
                    role: Role::Follower,
                    peer: src,
                    state: SessionState::Reserving,
                    candidates: Vec::new(),
                    current_candidate: 0,
                    retries: 0,
                    created_at: now,
                    completed_at: None,
                    dequeued_at: None,
                    timeout_at: now + self.config.request_timeout,
                    attempt: Some(Attempt {
                        bsa,
                        own_bsa_port: own_port,
                        rank,
                        next_hop: NodeId(0),
                        out_port: None,
                    }),
                    own_reserved: false,
                    peer_reserved: false,
                    response_outstanding: false,
                    doomed: false,
                    doomed_by: None,
                    abandon_on_settle: false,
                    stashed_target: None,
                    proposed_start: None,
                    was_queued: false,
                    carried_retries: 0,
                };
                self.sessions.insert(sid, session);
                self.engagement = Some(Engagement::Follower(sid));
                out.transition(sid, None, SessionState::Reserving);
                out.send(src, MessageKind::TargetAck { session: sid });
                self.begin_reservation(sid, now, out)
            }
            Some(Engagement::Follower(existing)) if existing == sid => {
                // Reselection after a reject: new target for the same
                // session.
                let session = self.sessions.get_mut(&sid).expect("follower session");
                if session.response_outstanding {
                    // The previous attempt has not settled yet; pick the
                    // new target up as soon as it does.
                    session.stashed_target = Some((bsa, own_port, rank));
                    return Ok(());
                }
                if session.state != SessionState::Selecting {
                    return Ok(());
                }
                session.attempt = Some(Attempt {
                    bsa,
                    own_bsa_port: own_port,
                    rank,
                    next_hop: NodeId(0),
                    out_port: None,
                });
                session.own_reserved = false;
                session.state = SessionState::Reserving;
                out.transition(sid, Some(SessionState::Selecting), SessionState::Reserving);
                out.send(src, MessageKind::TargetAck { session: sid });
                self.begin_reservation(sid, now, out)
            }
            _ => Ok(()), // stale selection for an abandoned exchange
        }
    }

    fn on_target_ack(&mut self, src: NodeId, sid: SessionId, now: Timestamp, out: &mut Out) {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return;
        };
        if session.peer != src || session.state != SessionState::AwaitingTargetAck {
            return;
        }
        session.state = SessionState::Reserving;
        out.transition(sid, Some(SessionState::AwaitingTargetAck), SessionState::Reserving);
        self.begin_reservation(sid, now, out)
            .expect("lead candidates come from its own table");
    }

    /// Reserves the node's own outbound port and launches the
    /// hop-by-hop reservation toward the target BSA input port.
    fn begin_reservation(
        &mut self,
        sid: SessionId,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        let session = self.sessions.get_mut(&sid).expect("session exists");
        let attempt = session.attempt.as_mut().expect("attempt set");
        let table = self.table.as_ref().expect("tables exist after discovery");
        let entry = table.entry(attempt.bsa, attempt.own_bsa_port).ok_or_else(|| {
            ProtocolViolation::CorruptState {
                node: self.id,
                detail: format!(
                    "no route to bsa {} port {} though it was selected",
                    attempt.bsa, attempt.own_bsa_port
                ),
            }
        })?;
        let next_hop = entry.next_hop;
        let bsa_port = (next_hop == attempt.bsa).then_some(attempt.own_bsa_port);
        let link = select_out_link(&self.adjacency, next_hop, bsa_port).ok_or_else(|| {
            ProtocolViolation::CorruptState {
                node: self.id,
                detail: format!("no channel toward next hop {next_hop}"),
            }
        })?;
        debug_assert!(!self.reservations.contains_key(&link.local_port));
        self.reservations.insert(
            link.local_port,
            PortReservation {
                port: link.local_port,
                session: sid,
                reserved_at: now,
            },
        );
        attempt.next_hop = next_hop;
        attempt.out_port = Some(link.local_port);
        let bsa = attempt.bsa;
        let own_bsa_port = attempt.own_bsa_port;
        session.response_outstanding = true;
        out.send(
            next_hop,
            MessageKind::RouteReserveRequest {
                session: sid,
                bsa,
                bsa_port: own_bsa_port,
                requester: self.id,
            },
        );
        Ok(())
    }

    // ---- reservation results ----------------------------------------------

    /// True when this message is the answer to our currently
    /// outstanding route reservation: responses always come back via
    /// the attempt's first hop.
    fn is_own_path_response(session: &Session, src: NodeId) -> bool {
        session.response_outstanding && session.attempt.map(|a| a.next_hop) == Some(src)
    }

    fn on_route_reserve_ack(
        &mut self,
        src: NodeId,
        sid: SessionId,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return Ok(());
        };
        if !Self::is_own_path_response(session, src) {
            return Ok(());
        }
        session.response_outstanding = false;
        if session.abandon_on_settle {
            self.finish_abandoned(sid, now, out);
            return Ok(());
        }
        if session.doomed {
            // The peer's side already failed; this fully reserved path
            // goes straight back.
            let by = session.doomed_by.unwrap_or(session.peer);
            return self.settle_failed_attempt(sid, by, false, now, out);
        }
        session.own_reserved = true;
        match session.role {
            Role::Lead => {
                if session.peer_reserved {
                    self.complete_and_schedule(sid, now, out);
                } else {
                    session.state = SessionState::AwaitingPeerReservation;
                    out.transition(
                        sid,
                        Some(SessionState::Reserving),
                        SessionState::AwaitingPeerReservation,
                    );
                }
            }
            Role::Follower => {
                session.state = SessionState::ReservationDone;
                let peer = session.peer;
                out.transition(sid, Some(SessionState::Reserving), SessionState::ReservationDone);
                out.send(peer, MessageKind::ReservationComplete { session: sid });
            }
        }
        Ok(())
    }

    fn on_reservation_complete(&mut self, sid: SessionId, now: Timestamp, out: &mut Out) {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return;
        };
        match session.role {
            Role::Lead => {
                // Only a completion for the current attempt counts; one
                // sent for a failed attempt always arrives before the
                // peer's ack of the next target, i.e. while we are
                // still awaiting that ack.
                if session.doomed
                    || !matches!(
                        session.state,
                        SessionState::Reserving | SessionState::AwaitingPeerReservation
                    )
                {
                    return;
                }
                session.peer_reserved = true;
                if session.own_reserved {
                    self.complete_and_schedule(sid, now, out);
                }
            }
            Role::Follower => {
                // The lead's confirmation leg of the exchange; the
                // start-time proposal follows in the same tick.
            }
        }
    }

    /// Both paths stand: confirm to the peer and propose the start
    /// time.
    fn complete_and_schedule(&mut self, sid: SessionId, now: Timestamp, out: &mut Out) {
        let session = self.sessions.get_mut(&sid).expect("session exists");
        let start_time = now + self.config.reconfiguration_delay;
        session.proposed_start = Some(start_time);
        let from = session.state;
        session.state = SessionState::AwaitingStartAck;
        let peer = session.peer;
        out.transition(sid, Some(from), SessionState::ReservationDone);
        out.transition(sid, Some(SessionState::ReservationDone), SessionState::AwaitingStartAck);
        out.send(peer, MessageKind::ReservationComplete { session: sid });
        out.send(
            peer,
            MessageKind::ProposeStartTime {
                session: sid,
                start_time,
            },
        );
    }

    fn on_propose_start_time(
        &mut self,
        sid: SessionId,
        start_time: Timestamp,
        now: Timestamp,
        out: &mut Out,
    ) {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return;
        };
        if session.role != Role::Follower || session.state != SessionState::ReservationDone {
            return;
        }
        session.proposed_start = Some(start_time);
        session.state = SessionState::Active;
        session.completed_at = Some(now);
        let peer = session.peer;
        out.transition(sid, Some(SessionState::ReservationDone), SessionState::Active);
        out.send(peer, MessageKind::StartTimeAck { session: sid });
        out.timer(
            start_time.max(now) + self.config.session_hold,
            TimerKind::SessionEnd { session: sid },
        );
    }

    fn on_start_time_ack(&mut self, sid: SessionId, now: Timestamp, out: &mut Out) {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return;
        };
        if session.role != Role::Lead || session.state != SessionState::AwaitingStartAck {
            return;
        }
        session.state = SessionState::Active;
        session.completed_at = Some(now);
        let attempt = session.attempt.expect("active session has an attempt");
        out.transition(sid, Some(SessionState::AwaitingStartAck), SessionState::Active);
        out.event(
            Some(sid),
            EventKind::SessionActive {
                arrival: session.created_at,
                queued: session.was_queued,
                retries: session.total_retries(),
                bsa: attempt.bsa,
                peer: session.peer,
            },
        );
        let start = session.proposed_start.unwrap_or(now);
        out.timer(
            start.max(now) + self.config.session_hold,
            TimerKind::SessionEnd { session: sid },
        );
    }

    // ---- failure and teardown ----------------------------------------------

    fn on_route_reserve_reject(
        &mut self,
        src: NodeId,
        sid: SessionId,
        rejecting_node: NodeId,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        let Some(session) = self.sessions.get_mut(&sid) else {
            return Ok(());
        };
        if src == session.peer {
            // The peer reports that its side of the bi-path failed.
            let relevant = match session.role {
                Role::Lead => matches!(
                    session.state,
                    SessionState::Reserving | SessionState::AwaitingPeerReservation
                ),
                Role::Follower => matches!(
                    session.state,
                    SessionState::Reserving | SessionState::ReservationDone
                ),
            };
            if !relevant || session.doomed {
                return Ok(()); // stale, or this round is already failing
            }
            if session.response_outstanding {
                // Never release behind a live request; settle when our
                // own answer arrives.
                session.doomed = true;
                session.doomed_by = Some(rejecting_node);
                return Ok(());
            }
            return self.settle_failed_attempt(sid, rejecting_node, false, now, out);
        }
        // Reject relayed back along our own path.
        if !Self::is_own_path_response(session, src) {
            return Ok(());
        }
        session.response_outstanding = false;
        if session.abandon_on_settle {
            self.finish_abandoned(sid, now, out);
            return Ok(());
        }
        let doomed = session.doomed;
        let by = if doomed {
            session.doomed_by.unwrap_or(rejecting_node)
        } else {
            rejecting_node
        };
        self.settle_failed_attempt(sid, by, !doomed, now, out)
    }

    /// An attempt failed and its path has fully settled: release it,
    /// notify the peer when the failure originated on our side, and
    /// move the session on (lead reselects; follower waits for or picks
    /// up the next target).
    fn settle_failed_attempt(
        &mut self,
        sid: SessionId,
        rejecting_node: NodeId,
        originated_here: bool,
        now: Timestamp,
        out: &mut Out,
    ) -> Result<(), ProtocolViolation> {
        let mut session = self.sessions.remove(&sid).expect("session exists");
        debug_assert!(!session.response_outstanding);
        self.release_own_path(&mut session, now, out);
        let from = session.state;
        let peer = session.peer;
        session.doomed = false;
        session.doomed_by = None;
        session.peer_reserved = false;
        match session.role {
            Role::Lead => {
                session.retries += 1;
                let rank = session.attempt.map(|a| a.rank).unwrap_or(0);
                out.event(
                    Some(sid),
                    EventKind::Retry {
                        rank,
                        rejecting_node,
                    },
                );
                let attempt_bsa = session.attempt.map(|a| a.bsa);
                session.state = SessionState::Selecting;
                self.sessions.insert(sid, session);
                out.transition(sid, Some(from), SessionState::Selecting);
                if originated_here {
                    out.send(
                        peer,
                        MessageKind::RouteReserveReject {
                            session: sid,
                            rejecting_node,
                        },
                    );
                }
                // Candidates pop at BSA granularity on failure: a
                // session needs both input ports of its BSA, so after a
                // reject anywhere on the way to one port the swapped
                // assignment of the same BSA is doomed as well.
                self.select_and_propose(sid, attempt_bsa, now, out);
                Ok(())
            }
            Role::Follower => {
                if originated_here {
                    out.send(
                        peer,
                        MessageKind::RouteReserveReject {
                            session: sid,
                            rejecting_node,
                        },
                    );
                }
                if let Some((bsa, port, rank)) = session.stashed_target.take() {
                    // The lead already picked the next candidate while
                    // we were settling.
                    session.attempt = Some(Attempt {
                        bsa,
                        own_bsa_port: port,
                        rank,
                        next_hop: NodeId(0),
                        out_port: None,
                    });
                    session.own_reserved = false;
                    session.state = SessionState::Reserving;
                    self.sessions.insert(sid, session);
                    out.transition(sid, Some(from), SessionState::Reserving);
                    out.send(peer, MessageKind::TargetAck { session: sid });
                    self.begin_reservation(sid, now, out)
                } else {
                    session.state = SessionState::Selecting;
                    self.sessions.insert(sid, session);
                    out.transition(sid, Some(from), SessionState::Selecting);
                    Ok(())
                }
            }
        }
    }

    /// Tears down a follower session whose lead queued the request.
    fn finish_abandoned(&mut self, sid: SessionId, now: Timestamp, out: &mut Out) {
        let Some(mut session) = self.sessions.remove(&sid) else {
            return;
        };
        self.release_own_path(&mut session, now, out);
        out.transition(sid, Some(session.state), SessionState::Failed);
        self.engagement = None;
        self.maybe_arm_dequeue(now, out);
    }

    fn on_request_queued_notice(
        &mut self,
        src: NodeId,
        sid: Option<SessionId>,
        now: Timestamp,
        out: &mut Out,
    ) {
        match self.engagement {
            Some(Engagement::Lead(own_sid)) => {
                let session = self.sessions.get(&own_sid).expect("lead session exists");
                if session.peer == src && session.state == SessionState::AwaitingPeerTable {
                    // Busy notice answering our table request.
                    self.queue_request_from_session(own_sid, QueueReason::PeerBusy, now, out);
                }
            }
            Some(Engagement::FollowerPending { lead }) if lead == src && sid.is_some() => {
                // The lead gave up before selecting a target. Only
                // session-carrying notices mean that; a bare busy notice
                // from the same node answers an old crossing request of
                // ours and the lead is still coming.
                self.engagement = None;
                self.maybe_arm_dequeue(now, out);
            }
            Some(Engagement::Follower(own_sid)) if Some(own_sid) == sid => {
                // The lead ran out of candidates and queued the request.
                let session = self.sessions.get_mut(&own_sid).expect("follower session");
                if session.response_outstanding {
                    session.abandon_on_settle = true;
                } else {
                    self.finish_abandoned(own_sid, now, out);
                }
            }
            _ => {}
        }
    }

    fn on_session_end(&mut self, sid: SessionId, now: Timestamp, out: &mut Out) {
        let Some(mut session) = self.sessions.remove(&sid) else {
            return;
        };
        debug_assert_eq!(session.state, SessionState::Active);
        self.release_own_path(&mut session, now, out);
        out.event(Some(sid), EventKind::SessionEnded);
        self.engagement = None;
        self.maybe_arm_dequeue(now, out);
    }

    /// Frees the node's own port and tells the first hop to release the
    /// rest of the path.
    fn release_own_path(&mut self, session: &mut Session, _now: Timestamp, out: &mut Out) {
        if let Some(attempt) = session.attempt.as_mut() {
            if let Some(port) = attempt.out_port.take() {
                self.reservations.remove(&port);
                out.send(
                    attempt.next_hop,
                    MessageKind::ReleaseResources {
                        session: session.id,
                    },
                );
            }
        }
        session.own_reserved = false;
    }
}

/// Outbound-capable link toward `target`; when the target is the BSA
/// itself the link must land on the requested input port. Parallel
/// links resolve to the smallest port pair so every node picks the same
/// channel.
pub(crate) fn select_out_link(
    adjacency: &[NeighborLink],
    target: NodeId,
    bsa_port: Option<PortId>,
) -> Option<NeighborLink> {
    adjacency
        .iter()
        .filter(|l| l.neighbor == target && l.direction != LinkDirection::Inbound)
        .filter(|l| bsa_port.is_none_or(|p| l.remote_port == p))
        .min_by_key(|l| (l.local_port, l.remote_port))
        .copied()
}
