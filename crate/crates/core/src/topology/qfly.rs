//! Q-Fly topology generation: a Dragonfly-style interconnect of groups,
//! each with one group switch, a pool of BSAs, and its end nodes. Group
//! switches are fully connected to each other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Channel, Endpoint, NodeId, NodeKind, PortId, Topology};

/// Parameters of a Q-Fly style network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFlyParams {
    /// Number of groups.
    pub g: u32,
    /// End nodes attached to one group switch in a fully populated
    /// system.
    pub p: u32,
    /// BSAs per group.
    pub b: u32,
    /// Group switch radix. Informational; this generator wires groups
    /// from `g`, `p`, and `b` and only uses `k` for labeling and
    /// consistency warnings.
    pub k: u32,
    /// Total end-node count when the system is not fully populated.
    /// End nodes are spread as evenly as possible, earlier groups
    /// taking the extras.
    pub n_override: Option<u32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QFlyError {
    #[error("invalid q-fly parameters: {0}")]
    InvalidParams(String),
}

impl QFlyParams {
    pub fn new(g: u32, p: u32, b: u32, k: u32) -> Self {
        QFlyParams {
            g,
            p,
            b,
            k,
            n_override: None,
        }
    }

    pub fn with_end_nodes(mut self, n: u32) -> Self {
        self.n_override = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), QFlyError> {
        if self.g < 1 || self.p < 1 || self.b < 1 {
            return Err(QFlyError::InvalidParams(format!(
                "g, p, b must all be >= 1 (got g={}, p={}, b={})",
                self.g, self.p, self.b
            )));
        }
        if let Some(n) = self.n_override {
            if n > self.g * self.p {
                return Err(QFlyError::InvalidParams(format!(
                    "n_override {} exceeds capacity g*p = {}",
                    n,
                    self.g * self.p
                )));
            }
        }
        Ok(())
    }

    /// Total end nodes after applying the override.
    pub fn total_end_nodes(&self) -> u32 {
        self.n_override.unwrap_or(self.g * self.p)
    }

    /// End nodes per group, earlier groups taking the extras.
    pub fn group_sizes(&self) -> Vec<u32> {
        let n = self.total_end_nodes();
        let base = n / self.g;
        let extra = n % self.g;
        (0..self.g)
            .map(|i| base + u32::from(i < extra))
            .collect()
    }

    /// Topology label, `SPHD-<n>` or `DPHD-<n>`. Dual-path quasi-half
    /// duplex is assumed when the declared radix budgets two links per
    /// attached end node (k >= 2p); otherwise single-path.
    pub fn label(&self) -> String {
        let prefix = if self.k >= 2 * self.p { "DPHD" } else { "SPHD" };
        format!("{prefix}-{}", self.total_end_nodes())
    }

    /// Radix consistency findings. The declared `k` often disagrees
    /// with the port count this wiring actually needs; that is
    /// tolerated as metadata.
    pub fn radix_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let sizes = self.group_sizes();
        let needed = sizes[0] + 2 * self.b + (self.g - 1);
        if self.k != needed {
            warnings.push(format!(
                "declared radix k={} differs from the {} ports this wiring uses on the \
                 largest group switch",
                self.k, needed
            ));
        }
        warnings
    }
}

/// Generates a Q-Fly topology. Node ids are assigned deterministically:
/// group switches first in group order, then BSAs group by group, then
/// end nodes group by group.
pub fn generate_qfly(params: &QFlyParams) -> Result<Topology, QFlyError> {
    params.validate()?;
    let g = params.g;
    let b = params.b;
    let sizes = params.group_sizes();

    let mut nodes = Vec::new();
    for s in 0..g {
        nodes.push((NodeId(s), NodeKind::Switch));
    }
    let bsa_base = g;
    for i in 0..g * b {
        nodes.push((NodeId(bsa_base + i), NodeKind::Bsa));
    }
    let end_base = g + g * b;
    let mut group_ends: Vec<Vec<NodeId>> = Vec::with_capacity(g as usize);
    let mut next_end = end_base;
    for &size in &sizes {
        let ids: Vec<NodeId> = (0..size).map(|i| NodeId(next_end + i)).collect();
        next_end += size;
        nodes.extend(ids.iter().map(|id| (*id, NodeKind::EndNode)));
        group_ends.push(ids);
    }

    let mut channels = Vec::new();
    for group in 0..g {
        let switch = NodeId(group);
        let mut next_port = 0u32;
        // End nodes: one bidirectional pair each, on the end node's
        // single port 0.
        for end in &group_ends[group as usize] {
            let sp = Endpoint::new(switch, PortId(next_port));
            let ep = Endpoint::new(*end, PortId(0));
            channels.push(Channel::new(ep, sp));
            channels.push(Channel::new(sp, ep));
            next_port += 1;
        }
        // BSAs: forward-only feeds into both input ports.
        for i in 0..b {
            let bsa = NodeId(bsa_base + group * b + i);
            for input in 0..2 {
                let sp = Endpoint::new(switch, PortId(next_port));
                channels.push(Channel::new(sp, Endpoint::new(bsa, PortId(input))));
                next_port += 1;
            }
        }
        // Global links to every other group switch, one shared port per
        // peer. The peer's port for this link is computed from its own
        // allocation order so both sides agree.
        for other in 0..g {
            if other == group {
                continue;
            }
            let local = PortId(next_port);
            next_port += 1;
            if other < group {
                continue; // the pair was emitted when `other` was `group`
            }
            let remote_base =
                sizes[other as usize] + 2 * b + if group < other { group } else { group - 1 };
            let sp = Endpoint::new(switch, local);
            let op = Endpoint::new(NodeId(other), PortId(remote_base));
            channels.push(Channel::new(sp, op));
            channels.push(Channel::new(op, sp));
        }
    }

    Topology::build(params.label(), nodes, channels)
        .map_err(|e| QFlyError::InvalidParams(format!("internal wiring bug: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::LinkDirection;

    #[test]
    fn dphd42_counts_and_name() {
        let params = QFlyParams::new(7, 6, 3, 12).with_end_nodes(42);
        let topo = generate_qfly(&params).unwrap();
        assert_eq!(topo.name(), "DPHD-42");
        assert_eq!(topo.nodes_of_kind(NodeKind::Switch).len(), 7);
        assert_eq!(topo.nodes_of_kind(NodeKind::Bsa).len(), 21);
        assert_eq!(topo.nodes_of_kind(NodeKind::EndNode).len(), 42);
        assert_eq!(topo.node_count(), 70);
        assert!(topo.warnings().is_empty(), "{:?}", topo.warnings());
    }

    #[test]
    fn sphd20_distributes_end_nodes_evenly() {
        let params = QFlyParams::new(5, 5, 2, 6).with_end_nodes(20);
        let topo = generate_qfly(&params).unwrap();
        assert_eq!(topo.name(), "SPHD-20");
        assert_eq!(topo.nodes_of_kind(NodeKind::Switch).len(), 5);
        assert_eq!(topo.nodes_of_kind(NodeKind::Bsa).len(), 10);
        assert_eq!(topo.nodes_of_kind(NodeKind::EndNode).len(), 20);
        // Groups of 4 each: every switch serves exactly 4 end nodes.
        for s in 0..5 {
            let ends = topo
                .neighbors(NodeId(s))
                .unwrap()
                .iter()
                .filter(|l| topo.kind(l.neighbor) == Some(NodeKind::EndNode))
                .count();
            assert_eq!(ends, 4);
        }
    }

    #[test]
    fn uneven_override_favors_earlier_groups() {
        let params = QFlyParams::new(5, 5, 2, 6).with_end_nodes(22);
        assert_eq!(params.group_sizes(), vec![5, 5, 4, 4, 4]);
    }

    #[test]
    fn minimal_group_reaches_bsa_in_two_hops() {
        let params = QFlyParams::new(1, 2, 1, 4);
        let topo = generate_qfly(&params).unwrap();
        assert_eq!(topo.nodes_of_kind(NodeKind::Switch).len(), 1);
        assert_eq!(topo.nodes_of_kind(NodeKind::Bsa).len(), 1);
        let ends = topo.nodes_of_kind(NodeKind::EndNode);
        assert_eq!(ends.len(), 2);
        let bsa = topo.nodes_of_kind(NodeKind::Bsa)[0];
        for end in ends {
            assert_eq!(topo.classical_hops(end, bsa), Some(2));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(generate_qfly(&QFlyParams::new(0, 5, 2, 6)).is_err());
        assert!(generate_qfly(&QFlyParams::new(5, 5, 2, 6).with_end_nodes(26)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let params = QFlyParams::new(7, 6, 3, 12).with_end_nodes(42);
        let a = generate_qfly(&params).unwrap();
        let b = generate_qfly(&params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dphd42_switch_adjacency_composition() {
        let params = QFlyParams::new(7, 6, 3, 12).with_end_nodes(42);
        let topo = generate_qfly(&params).unwrap();
        let links = topo.neighbors(NodeId(0)).unwrap();
        let count_kind = |kind: NodeKind| {
            links
                .iter()
                .filter(|l| topo.kind(l.neighbor) == Some(kind))
                .map(|l| l.neighbor)
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        };
        // 6 end nodes + 3 BSAs + 6 other group switches.
        assert_eq!(count_kind(NodeKind::EndNode), 6);
        assert_eq!(count_kind(NodeKind::Bsa), 3);
        assert_eq!(count_kind(NodeKind::Switch), 6);
        // Each BSA is fed over two forward-only channels.
        let bsa_feeds = links
            .iter()
            .filter(|l| {
                topo.kind(l.neighbor) == Some(NodeKind::Bsa)
                    && l.direction == LinkDirection::Outbound
            })
            .count();
        assert_eq!(bsa_feeds, 6);
    }

    #[test]
    fn inter_group_ports_are_consistent() {
        // Every channel endpoint must be unique per direction; building
        // the topology already asserts that, so a successful build over
        // asymmetric group sizes exercises the port math.
        let params = QFlyParams::new(4, 3, 2, 9).with_end_nodes(10);
        let topo = generate_qfly(&params).unwrap();
        assert_eq!(topo.nodes_of_kind(NodeKind::EndNode).len(), 10);
        for s in 0..4 {
            let switches = topo
                .neighbors(NodeId(s))
                .unwrap()
                .iter()
                .filter(|l| topo.kind(l.neighbor) == Some(NodeKind::Switch))
                .count();
            assert_eq!(switches, 3);
        }
    }
}
