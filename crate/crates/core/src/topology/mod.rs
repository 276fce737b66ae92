//! Network graph model: end nodes, switches, and BSAs connected by
//! directed port-level channels.
//!
//! A channel forwards a flying qubit from one node's port to another
//! node's port. Classical control traffic is assumed to follow the same
//! adjacency, treated bidirectionally.

mod file;
mod qfly;

pub use file::{load_topology, serialize_topology, LoadError, ParseError};
pub use qfly::{generate_qfly, QFlyError, QFlyParams};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies one node within a topology.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies a port local to one node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PortId(pub u32);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The three node roles of the switched network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    /// Quantum end node holding stationary memory; sits at the boundary
    /// of the photonic synchronization domain.
    EndNode,
    /// Memoryless optical switch forwarding flying qubits.
    Switch,
    /// Bell state analyzer with exactly two input ports.
    Bsa,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::EndNode => "endnode",
            NodeKind::Switch => "switch",
            NodeKind::Bsa => "bsa",
        };
        f.write_str(s)
    }
}

/// One side of a channel: a specific port on a specific node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Endpoint {
    pub node: NodeId,
    pub port: PortId,
}

impl Endpoint {
    pub fn new(node: NodeId, port: PortId) -> Self {
        Endpoint { node, port }
    }
}

/// A forward-only physical channel carrying a flying qubit from
/// `from` to `to`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Channel {
    pub from: Endpoint,
    pub to: Endpoint,
}

impl Channel {
    pub fn new(from: Endpoint, to: Endpoint) -> Self {
        Channel { from, to }
    }
}

/// Direction of a neighbor link relative to the queried node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkDirection {
    /// Forward channel each way over the same port pair.
    Bidirectional,
    /// Channel leaves the queried node only.
    Outbound,
    /// Channel enters the queried node only.
    Inbound,
}

/// One adjacency entry of [`Topology::neighbors`]. A matching pair of
/// forward channels (one each way over the same ports) is merged into a
/// single `Bidirectional` entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeighborLink {
    pub neighbor: NodeId,
    pub local_port: PortId,
    pub remote_port: PortId,
    pub direction: LinkDirection,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid topology:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

/// Immutable directed multigraph of the network. Construction validates
/// the structural invariants; afterwards the topology is safe to share
/// across any number of readers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    name: String,
    nodes: BTreeMap<NodeId, NodeKind>,
    /// Sorted by (from, to); unique per (endpoint, direction).
    channels: Vec<Channel>,
    /// Non-fatal validation findings (partial reachability and the like).
    warnings: Vec<String>,
}

impl Topology {
    /// Builds a topology from raw parts, collecting every violated
    /// invariant rather than stopping at the first.
    pub fn build(
        name: impl Into<String>,
        nodes: Vec<(NodeId, NodeKind)>,
        mut channels: Vec<Channel>,
    ) -> Result<Topology, TopologyError> {
        let name = name.into();
        let mut errors = Vec::new();

        if nodes.is_empty() {
            errors.push("no nodes declared".to_string());
        }

        let mut node_map = BTreeMap::new();
        for (id, kind) in &nodes {
            if node_map.insert(*id, *kind).is_some() {
                errors.push(format!("duplicate node id {id}"));
            }
        }

        channels.sort();
        let mut out_seen = BTreeSet::new();
        let mut in_seen = BTreeSet::new();
        for ch in &channels {
            for ep in [ch.from, ch.to] {
                if !node_map.contains_key(&ep.node) {
                    errors.push(format!(
                        "channel {}:{} -> {}:{} references unknown node {}",
                        ch.from.node, ch.from.port, ch.to.node, ch.to.port, ep.node
                    ));
                }
            }
            if ch.from.node == ch.to.node {
                errors.push(format!(
                    "channel {}:{} -> {}:{} is a self-loop",
                    ch.from.node, ch.from.port, ch.to.node, ch.to.port
                ));
            }
            if !out_seen.insert(ch.from) {
                errors.push(format!(
                    "port {}:{} feeds more than one outbound channel",
                    ch.from.node, ch.from.port
                ));
            }
            if !in_seen.insert(ch.to) {
                errors.push(format!(
                    "port {}:{} terminates more than one inbound channel",
                    ch.to.node, ch.to.port
                ));
            }
        }

        // A BSA interferes exactly two photons: two distinct input ports.
        for (id, kind) in &node_map {
            if *kind == NodeKind::Bsa {
                let inbound: BTreeSet<PortId> = channels
                    .iter()
                    .filter(|c| c.to.node == *id)
                    .map(|c| c.to.port)
                    .collect();
                if inbound.len() != 2 {
                    errors.push(format!(
                        "bsa {id} has {} inbound channel endpoint(s), expected exactly 2",
                        inbound.len()
                    ));
                }
            }
        }

        if !errors.is_empty() {
            return Err(TopologyError::Invalid(errors));
        }

        let mut topo = Topology {
            name,
            nodes: node_map,
            channels,
            warnings: Vec::new(),
        };
        topo.warnings = topo.compute_warnings();
        Ok(topo)
    }

    fn compute_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for (id, kind) in &self.nodes {
            if *kind == NodeKind::Bsa && self.channels.iter().any(|c| c.from.node == *id) {
                warnings.push(format!("bsa {id} has an outbound quantum channel"));
            }
        }
        if !self.nodes.is_empty() {
            let start = *self.nodes.keys().next().unwrap();
            let mut reached = BTreeSet::new();
            let mut queue = VecDeque::from([start]);
            reached.insert(start);
            while let Some(u) = queue.pop_front() {
                for ch in &self.channels {
                    let next = if ch.from.node == u {
                        Some(ch.to.node)
                    } else if ch.to.node == u {
                        Some(ch.from.node)
                    } else {
                        None
                    };
                    if let Some(v) = next {
                        if reached.insert(v) {
                            queue.push_back(v);
                        }
                    }
                }
            }
            if reached.len() != self.nodes.len() {
                warnings.push(format!(
                    "topology is not connected: {} of {} nodes reachable from node {start}; \
                     some BSA tables will be partial",
                    reached.len(),
                    self.nodes.len()
                ));
            }
        }
        warnings
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains_key(&node)
    }

    pub fn kind(&self, node: NodeId) -> Option<NodeKind> {
        self.nodes.get(&node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.nodes.iter().map(|(id, kind)| (*id, *kind))
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, k)| **k == kind)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn end_nodes(&self) -> Vec<NodeId> {
        self.nodes_of_kind(NodeKind::EndNode)
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// Deterministically ordered adjacency of `node`, covering outbound
    /// and inbound channels, with forward/backward pairs over the same
    /// ports merged into one bidirectional entry.
    pub fn neighbors(&self, node: NodeId) -> Result<Vec<NeighborLink>, TopologyError> {
        if !self.contains(node) {
            return Err(TopologyError::UnknownNode(node));
        }
        // (neighbor, local, remote) -> (has_out, has_in)
        let mut links: BTreeMap<(NodeId, PortId, PortId), (bool, bool)> = BTreeMap::new();
        for ch in &self.channels {
            if ch.from.node == node {
                links
                    .entry((ch.to.node, ch.from.port, ch.to.port))
                    .or_default()
                    .0 = true;
            }
            if ch.to.node == node {
                links
                    .entry((ch.from.node, ch.to.port, ch.from.port))
                    .or_default()
                    .1 = true;
            }
        }
        Ok(links
            .into_iter()
            .map(|((neighbor, local_port, remote_port), (out, inb))| NeighborLink {
                neighbor,
                local_port,
                remote_port,
                direction: match (out, inb) {
                    (true, true) => LinkDirection::Bidirectional,
                    (true, false) => LinkDirection::Outbound,
                    (false, true) => LinkDirection::Inbound,
                    (false, false) => unreachable!(),
                },
            })
            .collect())
    }

    /// Classical hop count between two nodes over the undirected
    /// projection of the channel graph. `None` when unreachable.
    pub fn classical_hops(&self, from: NodeId, to: NodeId) -> Option<u32> {
        if !self.contains(from) || !self.contains(to) {
            return None;
        }
        if from == to {
            return Some(0);
        }
        let mut dist = BTreeMap::from([(from, 0u32)]);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for ch in &self.channels {
                let next = if ch.from.node == u {
                    Some(ch.to.node)
                } else if ch.to.node == u {
                    Some(ch.from.node)
                } else {
                    None
                };
                if let Some(v) = next {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                        if v == to {
                            return Some(d + 1);
                        }
                        e.insert(d + 1);
                        queue.push_back(v);
                    }
                }
            }
        }
        None
    }
}

/// Small fixed topologies used by unit tests across the crate.
#[cfg(test)]
pub(crate) mod testdata {
    use super::*;

    /// Two switches, one BSA with both input ports on switch 0, one end
    /// node per switch. End node 3 reaches the BSA in 2 hops, end node
    /// 4 in 3.
    pub(crate) fn fig5() -> Topology {
        let nodes = vec![
            (NodeId(0), NodeKind::Switch),
            (NodeId(1), NodeKind::Switch),
            (NodeId(2), NodeKind::Bsa),
            (NodeId(3), NodeKind::EndNode),
            (NodeId(4), NodeKind::EndNode),
        ];
        let ep = Endpoint::new;
        let channels = vec![
            Channel::new(ep(NodeId(3), PortId(0)), ep(NodeId(0), PortId(0))),
            Channel::new(ep(NodeId(0), PortId(0)), ep(NodeId(3), PortId(0))),
            Channel::new(ep(NodeId(4), PortId(0)), ep(NodeId(1), PortId(0))),
            Channel::new(ep(NodeId(1), PortId(0)), ep(NodeId(4), PortId(0))),
            Channel::new(ep(NodeId(0), PortId(1)), ep(NodeId(1), PortId(1))),
            Channel::new(ep(NodeId(1), PortId(1)), ep(NodeId(0), PortId(1))),
            Channel::new(ep(NodeId(0), PortId(2)), ep(NodeId(2), PortId(0))),
            Channel::new(ep(NodeId(0), PortId(3)), ep(NodeId(2), PortId(1))),
        ];
        Topology::build("fig5", nodes, channels).unwrap()
    }
}
