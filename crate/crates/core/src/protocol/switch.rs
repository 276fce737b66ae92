//! Optical switch state machine: forwards route reservations toward the
//! target BSA, holds port reservations first-come-first-served, relays
//! acks and rejects back along the reserved path, and frees ports on
//! release.

use std::collections::{BTreeMap, VecDeque};

use crate::discovery::BsaTable;
use crate::eventlog::Timestamp;
use crate::topology::{LinkDirection, NeighborLink, NodeId, PortId};

use super::end_node::select_out_link;
use super::{
    Message, MessageKind, Output, PortReservation, ProtocolViolation, SessionId,
};

#[derive(Debug, Clone, Copy)]
struct Hold {
    reservation: PortReservation,
    requester: NodeId,
}

/// Per-path bookkeeping: where the reservation came from and where it
/// went, so responses and releases can retrace it.
#[derive(Debug, Clone, Copy)]
struct PathHold {
    upstream: NodeId,
    in_port: PortId,
    out_port: PortId,
    downstream: NodeId,
}

#[derive(Debug, Clone)]
pub struct SwitchNode {
    id: NodeId,
    adjacency: Vec<NeighborLink>,
    table: Option<BsaTable>,
    reservations: BTreeMap<PortId, Hold>,
    paths: BTreeMap<(SessionId, NodeId), PathHold>,
    /// Requesters whose forwarded reservations still await a response,
    /// in forwarding order per (session, downstream). Links deliver in
    /// order and every request draws exactly one answer, so the oldest
    /// entry is the one a response belongs to; both of a session's
    /// paths can cross this switch toward the same downstream node, and
    /// the answers carry no requester.
    awaiting_response: BTreeMap<(SessionId, NodeId), VecDeque<NodeId>>,
}

impl SwitchNode {
    pub fn new(id: NodeId, adjacency: Vec<NeighborLink>) -> Self {
        SwitchNode {
            id,
            adjacency,
            table: None,
            reservations: BTreeMap::new(),
            paths: BTreeMap::new(),
            awaiting_response: BTreeMap::new(),
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

    pub fn reservations(&self) -> impl Iterator<Item = &PortReservation> {
        self.reservations.values().map(|h| &h.reservation)
    }

    /// Seeds a reservation out-of-band. Test hook for fault-injection
    /// scenarios; the protocol itself only reserves via messages.
    pub fn inject_reservation(&mut self, port: PortId, session: SessionId, now: Timestamp) {
        self.reservations.insert(
            port,
            Hold {
                reservation: PortReservation {
                    port,
                    session,
                    reserved_at: now,
                },
                requester: session.lead,
            },
        );
    }

    /// Drops an injected reservation again (test hook).
    pub fn clear_reservation(&mut self, port: PortId) {
        self.reservations.remove(&port);
    }

    fn free_for(&self, port: PortId, session: SessionId, requester: NodeId) -> bool {
        match self.reservations.get(&port) {
            None => true,
            Some(hold) => {
                hold.reservation.session == session && hold.requester == requester
            }
        }
    }

    pub fn handle(
        &mut self,
        msg: Message,
        now: Timestamp,
    ) -> Result<Vec<Output>, ProtocolViolation> {
        let mut outputs = Vec::new();
        match msg.kind {
            MessageKind::RouteReserveRequest {
                session,
                bsa,
                bsa_port,
                requester,
            } => {
                self.on_reserve_request(msg.src, session, bsa, bsa_port, requester, now, &mut outputs)?;
            }
            MessageKind::RouteReserveAck { session } => {
                if let Some(path) = self.take_awaiting(session, msg.src) {
                    outputs.push(Output::Send(Message {
                        src: self.id,
                        dst: path.upstream,
                        kind: MessageKind::RouteReserveAck { session },
                    }));
                }
            }
            MessageKind::RouteReserveReject {
                session,
                rejecting_node,
            } => {
                if let Some(path) = self.take_awaiting(session, msg.src) {
                    outputs.push(Output::Send(Message {
                        src: self.id,
                        dst: path.upstream,
                        kind: MessageKind::RouteReserveReject {
                            session,
                            rejecting_node,
                        },
                    }));
                }
            }
            MessageKind::ReleaseResources { session } => {
                self.on_release(msg.src, session, &mut outputs);
            }
            _ => {}
        }
        Ok(outputs)
    }

    /// Attributes a response arriving from `downstream` to the oldest
    /// forwarded request still awaiting one, and returns that path.
    fn take_awaiting(&mut self, session: SessionId, downstream: NodeId) -> Option<PathHold> {
        let queue = self.awaiting_response.get_mut(&(session, downstream))?;
        let requester = queue.pop_front()?;
        if queue.is_empty() {
            self.awaiting_response.remove(&(session, downstream));
        }
        self.paths.get(&(session, requester)).copied()
    }

    #[allow(clippy::too_many_arguments)]
    fn on_reserve_request(
        &mut self,
        from: NodeId,
        session: SessionId,
        bsa: NodeId,
        bsa_port: PortId,
        requester: NodeId,
        now: Timestamp,
        outputs: &mut Vec<Output>,
    ) -> Result<(), ProtocolViolation> {
        let entry = self
            .table
            .as_ref()
            .and_then(|t| t.entry(bsa, bsa_port))
            .copied()
            .ok_or_else(|| ProtocolViolation::CorruptState {
                node: self.id,
                detail: format!("reservation for unreachable bsa {bsa} port {bsa_port}"),
            })?;
        let in_link = self
            .adjacency
            .iter()
            .filter(|l| l.neighbor == from && l.direction != LinkDirection::Outbound)
            .min_by_key(|l| (l.local_port, l.remote_port))
            .copied()
            .ok_or_else(|| ProtocolViolation::CorruptState {
                node: self.id,
                detail: format!("reserve request from non-neighbor {from}"),
            })?;
        let target_port = (entry.next_hop == bsa).then_some(bsa_port);
        let out_link = select_out_link(&self.adjacency, entry.next_hop, target_port).ok_or_else(
            || ProtocolViolation::CorruptState {
                node: self.id,
                detail: format!("no channel toward next hop {}", entry.next_hop),
            },
        )?;

        // First come, first served: a held port is never preempted; the
        // later request is the one rejected. A replay of the same path's
        // own request stays idempotent.
        if !self.free_for(in_link.local_port, session, requester)
            || !self.free_for(out_link.local_port, session, requester)
        {
            outputs.push(Output::Send(Message {
                src: self.id,
                dst: from,
                kind: MessageKind::RouteReserveReject {
                    session,
                    rejecting_node: self.id,
                },
            }));
            return Ok(());
        }

        for port in [in_link.local_port, out_link.local_port] {
            self.reservations.insert(
                port,
                Hold {
                    reservation: PortReservation {
                        port,
                        session,
                        reserved_at: now,
                    },
                    requester,
                },
            );
        }
        self.paths.insert(
            (session, requester),
            PathHold {
                upstream: from,
                in_port: in_link.local_port,
                out_port: out_link.local_port,
                downstream: entry.next_hop,
            },
        );
        self.awaiting_response
            .entry((session, entry.next_hop))
            .or_default()
            .push_back(requester);
        outputs.push(Output::Send(Message {
            src: self.id,
            dst: entry.next_hop,
            kind: MessageKind::RouteReserveRequest {
                session,
                bsa,
                bsa_port,
                requester,
            },
        }));
        Ok(())
    }

    fn on_release(&mut self, from: NodeId, session: SessionId, outputs: &mut Vec<Output>) {
        let keys: Vec<(SessionId, NodeId)> = self
            .paths
            .iter()
            .filter(|((sid, _), p)| *sid == session && p.upstream == from)
            .map(|(k, _)| *k)
            .collect();
        for key in keys {
            let path = self.paths.remove(&key).unwrap();
            for port in [path.in_port, path.out_port] {
                if let Some(hold) = self.reservations.get(&port) {
                    if hold.reservation.session == session {
                        self.reservations.remove(&port);
                    }
                }
            }
            outputs.push(Output::Send(Message {
                src: self.id,
                dst: path.downstream,
                kind: MessageKind::ReleaseResources { session },
            }));
        }
        // No matching path: we rejected this session or released
        // already; the release stops here.
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::{compute_bsa_table, Lsdb};
    use crate::topology::testdata::fig5;

    fn sid(lead: u32, serial: u64) -> SessionId {
        SessionId {
            lead: NodeId(lead),
            serial,
        }
    }

    /// Switch 0 of the worked example: end node 3 on port 0, switch 1
    /// on port 1, BSA feeds on ports 2 and 3.
    fn switch0() -> SwitchNode {
        let topo = fig5();
        let mut sw = SwitchNode::new(NodeId(0), topo.neighbors(NodeId(0)).unwrap());
        sw.set_table(compute_bsa_table(&Lsdb::from_topology(&topo), NodeId(0)));
        sw
    }

    fn reserve(session: SessionId, from: u32, port: u32, requester: u32) -> Message {
        Message {
            src: NodeId(from),
            dst: NodeId(0),
            kind: MessageKind::RouteReserveRequest {
                session,
                bsa: NodeId(2),
                bsa_port: PortId(port),
                requester: NodeId(requester),
            },
        }
    }

    fn sent(outputs: &[Output]) -> Vec<&Message> {
        outputs
            .iter()
            .filter_map(|o| match o {
                Output::Send(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn free_ports_forward_and_hold() {
        let mut sw = switch0();
        let out = sw.handle(reserve(sid(3, 0), 3, 0, 3), 10).unwrap();
        let msgs = sent(&out);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].dst, NodeId(2));
        assert!(matches!(
            msgs[0].kind,
            MessageKind::RouteReserveRequest { .. }
        ));
        // Inbound port from node 3 and the feed toward BSA port 0.
        let held: Vec<PortId> = sw.reservations().map(|r| r.port).collect();
        assert_eq!(held, vec![PortId(0), PortId(2)]);
    }

    #[test]
    fn later_request_is_rejected_first_come_first_served() {
        let mut sw = switch0();
        sw.handle(reserve(sid(3, 0), 3, 0, 3), 10).unwrap();
        // A second session arrives over the switch-to-switch link and
        // wants the same feed port.
        let out = sw.handle(reserve(sid(4, 0), 1, 0, 4), 11).unwrap();
        let msgs = sent(&out);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].dst, NodeId(1));
        assert!(matches!(
            msgs[0].kind,
            MessageKind::RouteReserveReject { rejecting_node: NodeId(0), .. }
        ));
        // The earlier holder is untouched.
        assert!(sw
            .reservations()
            .all(|r| r.session == sid(3, 0)));
    }

    #[test]
    fn replay_of_own_request_is_idempotent() {
        let mut sw = switch0();
        sw.handle(reserve(sid(3, 0), 3, 0, 3), 10).unwrap();
        let out = sw.handle(reserve(sid(3, 0), 3, 0, 3), 12).unwrap();
        let msgs = sent(&out);
        assert!(matches!(
            msgs[0].kind,
            MessageKind::RouteReserveRequest { .. }
        ));
        assert_eq!(sw.reservations().count(), 2);
    }

    #[test]
    fn responses_relay_in_forwarding_order() {
        let mut sw = switch0();
        // Both paths of one session cross this switch toward the BSA:
        // node 3 direct, node 4 via switch 1.
        sw.handle(reserve(sid(3, 7), 3, 0, 3), 10).unwrap();
        sw.handle(reserve(sid(3, 7), 1, 1, 4), 11).unwrap();
        let ack = Message {
            src: NodeId(2),
            dst: NodeId(0),
            kind: MessageKind::RouteReserveAck { session: sid(3, 7) },
        };
        // First answer belongs to the first forwarded request (node
        // 3's), the second to node 4's, relayed toward switch 1.
        let out = sw.handle(ack.clone(), 12).unwrap();
        assert_eq!(sent(&out)[0].dst, NodeId(3));
        let out = sw.handle(ack, 13).unwrap();
        assert_eq!(sent(&out)[0].dst, NodeId(1));
    }

    #[test]
    fn release_frees_ports_and_propagates_downstream() {
        let mut sw = switch0();
        sw.handle(reserve(sid(3, 0), 3, 0, 3), 10).unwrap();
        let release = Message {
            src: NodeId(3),
            dst: NodeId(0),
            kind: MessageKind::ReleaseResources { session: sid(3, 0) },
        };
        let out = sw.handle(release.clone(), 20).unwrap();
        assert_eq!(sw.reservations().count(), 0);
        let msgs = sent(&out);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].dst, NodeId(2));
        // A second release finds nothing and stops here.
        let out = sw.handle(release, 21).unwrap();
        assert!(sent(&out).is_empty());
    }

    #[test]
    fn injected_reservation_forces_rejects() {
        let mut sw = switch0();
        sw.inject_reservation(PortId(2), sid(99, 0), 0);
        let out = sw.handle(reserve(sid(3, 0), 3, 0, 3), 10).unwrap();
        assert!(matches!(
            sent(&out)[0].kind,
            MessageKind::RouteReserveReject { .. }
        ));
        sw.clear_reservation(PortId(2));
        let out = sw.handle(reserve(sid(3, 0), 3, 0, 3), 11).unwrap();
        assert!(matches!(
            sent(&out)[0].kind,
            MessageKind::RouteReserveRequest { .. }
        ));
    }
}
