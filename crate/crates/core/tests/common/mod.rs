//! Shared fixtures for the integration suites: the worked five-node
//! example, a random-topology generator, and a brute-force shortest
//! path oracle kept independent of the library's Dijkstra.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bipath::analytics::{summarize, RunSummary};
use bipath::simnet::{run, RunOutput, SimConfig, TopologySpec};
use bipath::topology::{
    load_topology, Channel, Endpoint, NodeId, NodeKind, PortId, QFlyParams, Topology,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIG5: &str = "
name fig5
node 0 switch
node 1 switch
node 2 bsa
node 3 endnode
node 4 endnode
channel 3:0 -> 0:0
channel 0:0 -> 3:0
channel 4:0 -> 1:0
channel 1:0 -> 4:0
channel 0:1 -> 1:1
channel 1:1 -> 0:1
channel 0:2 -> 2:0
channel 0:3 -> 2:1
";

pub fn fig5() -> Topology {
    load_topology(FIG5).expect("fig5 text is valid")
}

pub fn sphd20() -> TopologySpec {
    TopologySpec::QFly(QFlyParams::new(5, 5, 2, 6).with_end_nodes(20))
}

pub fn dphd42() -> TopologySpec {
    TopologySpec::QFly(QFlyParams::new(7, 6, 3, 12).with_end_nodes(42))
}

pub fn run_summarized(config: &SimConfig) -> (RunOutput, RunSummary) {
    let output = run(config).expect("run succeeds");
    let summary = summarize(&output.log).expect("log is well formed");
    (output, summary)
}

/// Random connected topology: a switch backbone tree plus extra switch
/// links, with end nodes and BSAs hanging off random switches.
pub fn random_topology(seed: u64, max_nodes: usize) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let switches = rng.gen_range(1..=(max_nodes / 4).max(1));
    let ends = rng.gen_range(2..=(max_nodes / 3).max(2));
    let bsas = rng.gen_range(1..=(max_nodes / 5).max(1));

    let mut nodes = Vec::new();
    let mut channels = Vec::new();
    let mut next_port: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut port = |map: &mut BTreeMap<NodeId, u32>, n: NodeId| {
        let p = map.entry(n).or_insert(0);
        let cur = *p;
        *p += 1;
        PortId(cur)
    };

    for s in 0..switches {
        nodes.push((NodeId(s as u32), NodeKind::Switch));
    }
    for s in 1..switches {
        let parent = NodeId(rng.gen_range(0..s) as u32);
        let child = NodeId(s as u32);
        let pp = port(&mut next_port, parent);
        let cp = port(&mut next_port, child);
        channels.push(Channel::new(
            Endpoint::new(parent, pp),
            Endpoint::new(child, cp),
        ));
        channels.push(Channel::new(
            Endpoint::new(child, cp),
            Endpoint::new(parent, pp),
        ));
    }
    for _ in 0..rng.gen_range(0..=switches) {
        let a = NodeId(rng.gen_range(0..switches) as u32);
        let b = NodeId(rng.gen_range(0..switches) as u32);
        if a == b {
            continue;
        }
        let pa = port(&mut next_port, a);
        let pb = port(&mut next_port, b);
        channels.push(Channel::new(Endpoint::new(a, pa), Endpoint::new(b, pb)));
        channels.push(Channel::new(Endpoint::new(b, pb), Endpoint::new(a, pa)));
    }
    let mut id = switches as u32;
    for _ in 0..bsas {
        let bsa = NodeId(id);
        id += 1;
        nodes.push((bsa, NodeKind::Bsa));
        for input in 0..2 {
            let s = NodeId(rng.gen_range(0..switches) as u32);
            let sp = port(&mut next_port, s);
            channels.push(Channel::new(
                Endpoint::new(s, sp),
                Endpoint::new(bsa, PortId(input)),
            ));
        }
    }
    for _ in 0..ends {
        let end = NodeId(id);
        id += 1;
        nodes.push((end, NodeKind::EndNode));
        let s = NodeId(rng.gen_range(0..switches) as u32);
        let sp = port(&mut next_port, s);
        channels.push(Channel::new(
            Endpoint::new(end, PortId(0)),
            Endpoint::new(s, sp),
        ));
        channels.push(Channel::new(
            Endpoint::new(s, sp),
            Endpoint::new(end, PortId(0)),
        ));
    }
    Topology::build(format!("random-{seed}"), nodes, channels).unwrap()
}

/// Brute-force oracle: layered breadth-first search over the directed
/// channels, forwarding only through switches; per BSA input port, the
/// minimum hop count from `owner`.
pub fn bfs_oracle(topo: &Topology, owner: NodeId) -> BTreeMap<(NodeId, PortId), u32> {
    let mut dist: BTreeMap<NodeId, u32> = BTreeMap::from([(owner, 0)]);
    let mut frontier = vec![owner];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for u in frontier {
            if u != owner && topo.kind(u) != Some(NodeKind::Switch) {
                continue;
            }
            let d = dist[&u];
            for ch in topo.channels().iter().filter(|c| c.from.node == u) {
                if !dist.contains_key(&ch.to.node) {
                    dist.insert(ch.to.node, d + 1);
                    next.push(ch.to.node);
                }
            }
        }
        frontier = next;
    }
    let mut out = BTreeMap::new();
    for ch in topo.channels() {
        if topo.kind(ch.to.node) != Some(NodeKind::Bsa) || ch.to.node == owner {
            continue;
        }
        if ch.from.node != owner && topo.kind(ch.from.node) != Some(NodeKind::Switch) {
            continue;
        }
        if let Some(d) = dist.get(&ch.from.node) {
            let key = (ch.to.node, ch.to.port);
            let cand = d + 1;
            out.entry(key)
                .and_modify(|c: &mut u32| *c = (*c).min(cand))
                .or_insert(cand);
        }
    }
    out
}
