//! Bell state analyzer state machine: grants or rejects input-port
//! reservations first-come-first-served and keeps a cumulative count of
//! the sessions it served.

use std::collections::{BTreeMap, BTreeSet};

use crate::eventlog::{EventKind, Timestamp};
use crate::topology::{LinkDirection, NeighborLink, NodeId, PortId};

use super::{
    Message, MessageKind, Output, PortReservation, ProtocolViolation, SessionId,
};

#[derive(Debug, Clone, Copy)]
struct Hold {
    reservation: PortReservation,
    requester: NodeId,
}

#[derive(Debug, Clone)]
pub struct BsaNode {
    id: NodeId,
    adjacency: Vec<NeighborLink>,
    reservations: BTreeMap<PortId, Hold>,
    /// Sessions that reached both input ports, counted once each.
    counted: BTreeSet<SessionId>,
}

impl BsaNode {
    pub fn new(id: NodeId, adjacency: Vec<NeighborLink>) -> Self {
        BsaNode {
            id,
            adjacency,
            reservations: BTreeMap::new(),
            counted: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn reservations(&self) -> impl Iterator<Item = &PortReservation> {
        self.reservations.values().map(|h| &h.reservation)
    }

    /// Cumulative sessions whose bi-path completed at this BSA.
    pub fn sessions_served(&self) -> u64 {
        self.counted.len() as u64
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
                if bsa != self.id {
                    return Err(ProtocolViolation::WrongBsa {
                        expected: bsa,
                        got: self.id,
                    });
                }
                let grant = match self.reservations.get(&bsa_port) {
                    None => true,
                    Some(hold) => {
                        hold.reservation.session == session && hold.requester == requester
                    }
                };
                if grant {
                    self.reservations.insert(
                        bsa_port,
                        Hold {
                            reservation: PortReservation {
                                port: bsa_port,
                                session,
                                reserved_at: now,
                            },
                            requester,
                        },
                    );
                    let both_ports_held = self
                        .reservations
                        .values()
                        .filter(|h| h.reservation.session == session)
                        .count()
                        == 2;
                    if both_ports_held && self.counted.insert(session) {
                        outputs.push(Output::Event {
                            session: Some(session),
                            kind: EventKind::BsaSessionReady,
                        });
                    }
                    outputs.push(Output::Send(Message {
                        src: self.id,
                        dst: msg.src,
                        kind: MessageKind::RouteReserveAck { session },
                    }));
                } else {
                    outputs.push(Output::Send(Message {
                        src: self.id,
                        dst: msg.src,
                        kind: MessageKind::RouteReserveReject {
                            session,
                            rejecting_node: self.id,
                        },
                    }));
                }
            }
            MessageKind::ReleaseResources { session } => {
                // A release implies the whole session is tearing down
                // (hold expiry or bilateral failure cleanup), so free
                // every port this session holds on links from the
                // sender. With both inputs wired to one switch that can
                // free the sibling path a tick early, which is safe for
                // the same reason.
                let from_ports: BTreeSet<PortId> = self
                    .adjacency
                    .iter()
                    .filter(|l| l.neighbor == msg.src && l.direction != LinkDirection::Outbound)
                    .map(|l| l.local_port)
                    .collect();
                let to_free: Vec<PortId> = self
                    .reservations
                    .iter()
                    .filter(|(port, hold)| {
                        hold.reservation.session == session && from_ports.contains(port)
                    })
                    .map(|(port, _)| *port)
                    .collect();
                for port in to_free {
                    self.reservations.remove(&port);
                }
            }
            _ => {}
        }
        Ok(outputs)
    }
}
