//! Control-plane library and deterministic simulator for memoryless,
//! multidrop quantum networks that share Bell state analyzers (BSAs)
//! behind optical switches.
//!
//! The crate is organized around the life of a link-establishment request:
//!
//! - [`topology`] models the network as a directed multigraph of end
//!   nodes, switches, and BSAs, generates Q-Fly style topologies, and
//!   parses/serializes a plain-text topology format.
//! - [`discovery`] floods local connectivity announcements and computes
//!   per-node BSA forwarding tables (shortest paths to every reachable
//!   BSA input port).
//! - [`protocol`] implements the end-node, switch, and BSA state
//!   machines: cooperative bi-path BSA selection, hop-by-hop circuit
//!   reservation with first-come-first-served conflict resolution,
//!   release, and request queuing.
//! - [`simnet`] is the discrete-event engine: sandboxed nodes, a global
//!   `(time, seq)` ordered scheduler, Poisson request traffic, and
//!   structured event logs. Same config and seed always reproduce a
//!   byte-identical log.
//! - [`analytics`] turns event logs into run summaries (completion
//!   times, immediate-completion rate, retries, per-BSA session counts)
//!   and sweep CSVs.

pub mod analytics;
pub mod discovery;
pub mod eventlog;
pub mod protocol;
pub mod simnet;
pub mod topology;
