//! Distributed topology discovery and BSA forwarding tables.
//!
//! Every node announces its local connectivity; announcements flood the
//! network (forwarded on all interfaces except the incoming one, with
//! duplicate suppression by per-origin sequence number). Once a node's
//! link-state database covers its component, it computes the shortest
//! path to every reachable BSA input port and stores the result in its
//! BSA forwarding table.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::topology::{
    Channel, Endpoint, LinkDirection, NeighborLink, NodeId, NodeKind, PortId, Topology,
};

/// One node's connectivity announcement. `(origin, seq)` identifies the
/// announcement network-wide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStateAnnouncement {
    pub origin: NodeId,
    pub origin_kind: NodeKind,
    pub seq: u64,
    pub adjacency: Vec<NeighborLink>,
}

/// Accumulated link-state database: every known node's kind and
/// announced adjacency.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lsdb {
    entries: BTreeMap<NodeId, (NodeKind, Vec<NeighborLink>)>,
}

impl Lsdb {
    /// Offline construction straight from a global topology, equivalent
    /// to what flooding converges to on a connected network.
    pub fn from_topology(topo: &Topology) -> Lsdb {
        let mut lsdb = Lsdb::default();
        for (id, kind) in topo.nodes() {
            let adjacency = topo.neighbors(id).expect("node listed by topology");
            lsdb.entries.insert(id, (kind, adjacency));
        }
        lsdb
    }

    pub fn insert(&mut self, lsa: &LinkStateAnnouncement) {
        self.entries
            .insert(lsa.origin, (lsa.origin_kind, lsa.adjacency.clone()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kind(&self, node: NodeId) -> Option<NodeKind> {
        self.entries.get(&node).map(|(k, _)| *k)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.entries.iter().map(|(id, (kind, _))| (*id, *kind))
    }

    /// Directed channels reconstructed from the announced adjacencies.
    /// Both endpoints of a link announce it; duplicates collapse.
    pub fn channels(&self) -> Vec<Channel> {
        let mut set = BTreeSet::new();
        for (origin, (_, adjacency)) in &self.entries {
            for link in adjacency {
                let local = Endpoint::new(*origin, link.local_port);
                let remote = Endpoint::new(link.neighbor, link.remote_port);
                match link.direction {
                    LinkDirection::Outbound => {
                        set.insert(Channel::new(local, remote));
                    }
                    LinkDirection::Inbound => {
                        set.insert(Channel::new(remote, local));
                    }
                    LinkDirection::Bidirectional => {
                        set.insert(Channel::new(local, remote));
                        set.insert(Channel::new(remote, local));
                    }
                }
            }
        }
        set.into_iter().collect()
    }
}

/// Per-node flooding state: own announcements plus what has been heard.
#[derive(Debug, Clone)]
pub struct DiscoveryState {
    origin: NodeId,
    origin_kind: NodeKind,
    adjacency: Vec<NeighborLink>,
    next_seq: u64,
    /// Highest sequence number seen per origin.
    seen: BTreeMap<NodeId, u64>,
    lsdb: Lsdb,
}

impl DiscoveryState {
    pub fn new(origin: NodeId, origin_kind: NodeKind, adjacency: Vec<NeighborLink>) -> Self {
        DiscoveryState {
            origin,
            origin_kind,
            adjacency,
            next_seq: 0,
            seen: BTreeMap::new(),
            lsdb: Lsdb::default(),
        }
    }

    pub fn lsdb(&self) -> &Lsdb {
        &self.lsdb
    }

    pub fn adjacency(&self) -> &[NeighborLink] {
        &self.adjacency
    }

    /// Local interfaces, one per distinct local port.
    pub fn interfaces(&self) -> Vec<PortId> {
        let ports: BTreeSet<PortId> = self.adjacency.iter().map(|l| l.local_port).collect();
        ports.into_iter().collect()
    }

    /// The neighbor reached over a local interface.
    pub fn neighbor_on(&self, port: PortId) -> Option<NodeId> {
        self.adjacency
            .iter()
            .find(|l| l.local_port == port)
            .map(|l| l.neighbor)
    }

    /// Produces this node's next announcement and records it in the own
    /// database. First emission carries seq 0.
    pub fn emit_announcement(&mut self) -> LinkStateAnnouncement {
        let lsa = LinkStateAnnouncement {
            origin: self.origin,
            origin_kind: self.origin_kind,
            seq: self.next_seq,
            adjacency: self.adjacency.clone(),
        };
        self.next_seq += 1;
        self.seen.insert(self.origin, lsa.seq);
        self.lsdb.insert(&lsa);
        lsa
    }

    /// Handles a flooded announcement. Duplicates (same origin, seq not
    /// newer than already seen) are dropped; fresh information is stored
    /// and forwarded on every interface except the arriving one.
    pub fn handle_announcement(
        &mut self,
        lsa: &LinkStateAnnouncement,
        arrival_interface: PortId,
    ) -> Vec<(PortId, LinkStateAnnouncement)> {
        if let Some(&seen) = self.seen.get(&lsa.origin) {
            if seen >= lsa.seq {
                return Vec::new();
            }
        }
        self.seen.insert(lsa.origin, lsa.seq);
        self.lsdb.insert(lsa);
        self.interfaces()
            .into_iter()
            .filter(|p| *p != arrival_interface)
            .map(|p| (p, lsa.clone()))
            .collect()
    }
}

/// One row of a BSA forwarding table: how to reach one input port of
/// one BSA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BsaTableEntry {
    pub bsa: NodeId,
    pub bsa_port: PortId,
    pub cost: u32,
    pub next_hop: NodeId,
}

/// A node's BSA forwarding table, sorted by (cost, bsa, bsa_port).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsaTable {
    pub owner: NodeId,
    pub entries: Vec<BsaTableEntry>,
}

impl BsaTable {
    pub fn entry(&self, bsa: NodeId, bsa_port: PortId) -> Option<&BsaTableEntry> {
        self.entries
            .iter()
            .find(|e| e.bsa == bsa && e.bsa_port == bsa_port)
    }

    /// Debug dump, one `bsa=<id> port=<p> cost=<c> next_hop=<id>` line
    /// per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "bsa={} port={} cost={} next_hop={}",
                e.bsa, e.bsa_port, e.cost, e.next_hop
            )
            .unwrap();
        }
        out
    }
}

/// Shortest directed paths from `owner` over the database's channels.
/// Only switches forward photons, so paths may transit switches only;
/// any node may be a path's terminal. Equal-cost ties are broken by the
/// lexicographically smallest node sequence after the owner, which
/// makes route selection reproducible and consistent hop by hop.
fn shortest_paths(lsdb: &Lsdb, owner: NodeId) -> BTreeMap<NodeId, (u32, Vec<NodeId>)> {
    let channels = lsdb.channels();
    let mut out_edges: BTreeMap<NodeId, Vec<&Channel>> = BTreeMap::new();
    for ch in &channels {
        out_edges.entry(ch.from.node).or_default().push(ch);
    }

    let mut best: BTreeMap<NodeId, (u32, Vec<NodeId>)> = BTreeMap::new();
    let mut heap: BinaryHeap<Reverse<(u32, Vec<NodeId>, NodeId)>> = BinaryHeap::new();
    heap.push(Reverse((0, Vec::new(), owner)));
    while let Some(Reverse((cost, path, node))) = heap.pop() {
        if best.contains_key(&node) {
            continue;
        }
        best.insert(node, (cost, path.clone()));
        let can_forward = node == owner || lsdb.kind(node) == Some(NodeKind::Switch);
        if !can_forward {
            continue;
        }
        for ch in out_edges.get(&node).into_iter().flatten() {
            let next = ch.to.node;
            if best.contains_key(&next) {
                continue;
            }
            let mut next_path = path.clone();
            next_path.push(next);
            heap.push(Reverse((cost + 1, next_path, next)));
        }
    }
    best
}

/// Computes `owner`'s BSA forwarding table from a link-state database
/// covering its component. Unreachable BSA ports are simply absent.
pub fn compute_bsa_table(lsdb: &Lsdb, owner: NodeId) -> BsaTable {
    let paths = shortest_paths(lsdb, owner);
    let mut best: BTreeMap<(NodeId, PortId), (u32, Vec<NodeId>)> = BTreeMap::new();
    for ch in lsdb.channels() {
        let bsa = ch.to.node;
        if lsdb.kind(bsa) != Some(NodeKind::Bsa) || bsa == owner {
            continue;
        }
        let from = ch.from.node;
        let forwarder = from == owner || lsdb.kind(from) == Some(NodeKind::Switch);
        if !forwarder {
            continue;
        }
        let Some((cost, path)) = paths.get(&from) else {
            continue;
        };
        let mut full = path.clone();
        full.push(bsa);
        let candidate = (cost + 1, full);
        match best.entry((bsa, ch.to.port)) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(candidate);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                if candidate < *e.get() {
                    e.insert(candidate);
                }
            }
        }
    }

    let mut entries: Vec<BsaTableEntry> = best
        .into_iter()
        .map(|((bsa, bsa_port), (cost, path))| BsaTableEntry {
            bsa,
            bsa_port,
            cost,
            next_hop: path[0],
        })
        .collect();
    entries.sort_by_key(|e| (e.cost, e.bsa, e.bsa_port));
    BsaTable { owner, entries }
}


#[cfg(test)]
mod tests {
    use super::testutil::{bfs_oracle, random_topology};
    use super::*;
    use crate::topology::testdata::fig5;
    use crate::topology::{generate_qfly, QFlyParams, Topology};

    fn state_for(topo: &Topology, node: NodeId) -> DiscoveryState {
        DiscoveryState::new(
            node,
            topo.kind(node).unwrap(),
            topo.neighbors(node).unwrap(),
        )
    }

    /// Synchronous flood driver used by the unit tests; the simulator
    /// has its own event-driven flooding phase.
    fn flood(topo: &Topology) -> (BTreeMap<NodeId, DiscoveryState>, u64) {
        let mut states: BTreeMap<NodeId, DiscoveryState> = topo
            .nodes()
            .map(|(id, _)| (id, state_for(topo, id)))
            .collect();
        let mut sends = 0u64;
        let mut queue: std::collections::VecDeque<(NodeId, PortId, LinkStateAnnouncement)> =
            Default::default();
        let origins: Vec<NodeId> = states.keys().copied().collect();
        for id in origins {
            let state = states.get_mut(&id).unwrap();
            let lsa = state.emit_announcement();
            for link in state.adjacency().to_vec() {
                sends += 1;
                queue.push_back((link.neighbor, link.remote_port, lsa.clone()));
            }
        }
        while let Some((node, arrival, lsa)) = queue.pop_front() {
            let state = states.get_mut(&node).unwrap();
            for (out_port, fwd) in state.handle_announcement(&lsa, arrival) {
                let link = state
                    .adjacency()
                    .iter()
                    .find(|l| l.local_port == out_port)
                    .copied()
                    .unwrap();
                sends += 1;
                queue.push_back((link.neighbor, link.remote_port, fwd));
            }
        }
        (states, sends)
    }

    #[test]
    fn emission_sequence_is_monotonic() {
        let topo = fig5();
        let mut state = state_for(&topo, NodeId(3));
        let first = state.emit_announcement();
        assert_eq!(first.seq, 0);
        assert_eq!(first.adjacency.len(), 1);
        let second = state.emit_announcement();
        assert_eq!(second.seq, 1);
    }

    #[test]
    fn isolated_node_announces_empty_adjacency() {
        let mut state = DiscoveryState::new(NodeId(7), NodeKind::EndNode, vec![]);
        let lsa = state.emit_announcement();
        assert!(lsa.adjacency.is_empty());
    }

    #[test]
    fn fresh_announcement_forwarded_except_incoming() {
        let topo = fig5();
        // Switch 0 has interfaces 0 (end node), 1 (switch), 2 and 3
        // (BSA feeds).
        let mut state = state_for(&topo, NodeId(0));
        let mut remote = state_for(&topo, NodeId(4));
        let lsa = remote.emit_announcement();
        let forwards = state.handle_announcement(&lsa, PortId(1));
        let ports: Vec<PortId> = forwards.iter().map(|(p, _)| *p).collect();
        assert_eq!(ports, vec![PortId(0), PortId(2), PortId(3)]);
        // Replay of the already-seen announcement is dropped.
        assert!(state.handle_announcement(&lsa, PortId(1)).is_empty());
    }

    #[test]
    fn flooding_converges_and_stays_bounded() {
        let params = QFlyParams::new(7, 6, 3, 12).with_end_nodes(42);
        let topo = generate_qfly(&params).unwrap();
        let (states, sends) = flood(&topo);
        let reference = states[&NodeId(0)].lsdb().clone();
        assert_eq!(reference.len(), 70);
        for state in states.values() {
            assert_eq!(*state.lsdb(), reference);
        }
        let v = topo.node_count() as u64;
        let e = topo.channels().len() as u64;
        assert!(
            sends <= 4 * v * e,
            "flooding used {sends} sends, bound {}",
            4 * v * e
        );
    }

    #[test]
    fn fig5_tables_match_the_worked_example() {
        let topo = fig5();
        let lsdb = Lsdb::from_topology(&topo);
        // QC2 (node 3): both BSA ports two hops away through switch 0.
        let table = compute_bsa_table(&lsdb, NodeId(3));
        assert_eq!(
            table.entries,
            vec![
                BsaTableEntry {
                    bsa: NodeId(2),
                    bsa_port: PortId(0),
                    cost: 2,
                    next_hop: NodeId(0),
                },
                BsaTableEntry {
                    bsa: NodeId(2),
                    bsa_port: PortId(1),
                    cost: 2,
                    next_hop: NodeId(0),
                },
            ]
        );
        // QC4 (node 4): three hops, entering through switch 1.
        let table = compute_bsa_table(&lsdb, NodeId(4));
        assert!(table
            .entries
            .iter()
            .all(|e| e.cost == 3 && e.next_hop == NodeId(1)));
    }

    #[test]
    fn direct_bsa_attachment_costs_one_hop() {
        let nodes = vec![
            (NodeId(0), NodeKind::Bsa),
            (NodeId(1), NodeKind::EndNode),
            (NodeId(2), NodeKind::EndNode),
        ];
        let channels = vec![
            Channel::new(
                Endpoint::new(NodeId(1), PortId(0)),
                Endpoint::new(NodeId(0), PortId(0)),
            ),
            Channel::new(
                Endpoint::new(NodeId(2), PortId(0)),
                Endpoint::new(NodeId(0), PortId(1)),
            ),
        ];
        let topo = Topology::build("direct", nodes, channels).unwrap();
        let lsdb = Lsdb::from_topology(&topo);
        let table = compute_bsa_table(&lsdb, NodeId(1));
        assert_eq!(
            table.entries,
            vec![BsaTableEntry {
                bsa: NodeId(0),
                bsa_port: PortId(0),
                cost: 1,
                next_hop: NodeId(0),
            }]
        );
    }

    #[test]
    fn dijkstra_matches_bfs_oracle_on_random_graphs() {
        for seed in 0..25 {
            let topo = random_topology(seed, 30);
            let lsdb = Lsdb::from_topology(&topo);
            for (owner, kind) in topo.nodes() {
                if kind == NodeKind::Bsa {
                    continue;
                }
                let table = compute_bsa_table(&lsdb, owner);
                let oracle = bfs_oracle(&topo, owner);
                let got: BTreeMap<(NodeId, PortId), u32> = table
                    .entries
                    .iter()
                    .map(|e| ((e.bsa, e.bsa_port), e.cost))
                    .collect();
                assert_eq!(got, oracle, "owner {owner} on seed {seed}");
            }
        }
    }

    #[test]
    fn next_hop_chain_shrinks_cost_by_one() {
        let params = QFlyParams::new(5, 5, 2, 6).with_end_nodes(20);
        let topo = generate_qfly(&params).unwrap();
        let lsdb = Lsdb::from_topology(&topo);
        let tables: BTreeMap<NodeId, BsaTable> = topo
            .nodes()
            .filter(|(_, k)| *k != NodeKind::Bsa)
            .map(|(id, _)| (id, compute_bsa_table(&lsdb, id)))
            .collect();
        for table in tables.values() {
            for entry in &table.entries {
                if entry.next_hop == entry.bsa {
                    assert_eq!(entry.cost, 1);
                    continue;
                }
                let next = &tables[&entry.next_hop];
                let there = next.entry(entry.bsa, entry.bsa_port).unwrap();
                assert_eq!(there.cost, entry.cost - 1, "triangle at {}", table.owner);
            }
        }
    }

    #[test]
    fn dump_format_is_stable() {
        let topo = fig5();
        let lsdb = Lsdb::from_topology(&topo);
        let table = compute_bsa_table(&lsdb, NodeId(3));
        assert_eq!(
            table.dump(),
            "bsa=2 port=0 cost=2 next_hop=0\nbsa=2 port=1 cost=2 next_hop=0\n"
        );
    }
}
