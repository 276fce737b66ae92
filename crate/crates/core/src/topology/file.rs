//! Line-oriented topology file format.
//!
//! ```text
//! # comment
//! name DPHD-42
//! node 0 switch
//! node 3 endnode
//! channel 0:2 -> 2:0
//! ```
//!
//! The `name` line is optional. Serialization emits nodes sorted by id
//! and channels sorted by (from, to), so serialize/load round-trips
//! exactly.

use std::fmt;

use thiserror::Error;

use super::{Channel, Endpoint, NodeId, NodeKind, PortId, Topology, TopologyError};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}, column {col}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Invalid(#[from] TopologyError),
}

struct LineCursor<'a> {
    text: &'a str,
    line: usize,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        LineCursor { text, line, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.text[self.pos..].starts_with([' ', '\t']) {
            self.pos += 1;
        }
    }

    /// Next whitespace-delimited token and its 1-based column.
    fn token(&mut self) -> Option<(&'a str, usize)> {
        self.skip_ws();
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.text.len() && !self.text[self.pos..].starts_with([' ', '\t']) {
            self.pos += 1;
        }
        Some((&self.text[start..self.pos], start + 1))
    }

    fn expect_token(&mut self, what: &str) -> Result<(&'a str, usize), ParseError> {
        let line = self.line;
        let col = self.pos + 1;
        self.token().ok_or_else(|| ParseError {
            line,
            col,
            reason: format!("expected {what}"),
        })
    }

    fn err(&self, col: usize, reason: impl fmt::Display) -> ParseError {
        ParseError {
            line: self.line,
            col,
            reason: reason.to_string(),
        }
    }
}

fn parse_endpoint(tok: &str, col: usize, cur: &LineCursor<'_>) -> Result<Endpoint, ParseError> {
    let (node, port) = tok
        .split_once(':')
        .ok_or_else(|| cur.err(col, format!("expected <node>:<port>, got `{tok}`")))?;
    let node: u32 = node
        .parse()
        .map_err(|_| cur.err(col, format!("invalid node id `{node}`")))?;
    let port: u32 = port
        .parse()
        .map_err(|_| cur.err(col, format!("invalid port id `{port}`")))?;
    Ok(Endpoint::new(NodeId(node), PortId(port)))
}

/// Parses and validates a topology file. Parse failures carry the line
/// and column; validation failures enumerate every violated invariant.
pub fn load_topology(text: &str) -> Result<Topology, LoadError> {
    let mut name: Option<String> = None;
    let mut nodes = Vec::new();
    let mut channels = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut cur = LineCursor::new(line, idx + 1);
        let Some((keyword, kw_col)) = cur.token() else {
            continue;
        };
        match keyword {
            "name" => {
                let (label, col) = cur.expect_token("topology name")?;
                if name.replace(label.to_string()).is_some() {
                    return Err(cur.err(col, "duplicate name line").into());
                }
            }
            "node" => {
                let (id, id_col) = cur.expect_token("node id")?;
                let id: u32 = id
                    .parse()
                    .map_err(|_| cur.err(id_col, format!("invalid node id `{id}`")))?;
                let (kind, kind_col) = cur.expect_token("node kind")?;
                let kind = match kind {
                    "endnode" => NodeKind::EndNode,
                    "switch" => NodeKind::Switch,
                    "bsa" => NodeKind::Bsa,
                    other => {
                        return Err(cur
                            .err(
                                kind_col,
                                format!("unknown node kind `{other}` (endnode|switch|bsa)"),
                            )
                            .into())
                    }
                };
                nodes.push((NodeId(id), kind));
            }
            "channel" => {
                let (from, from_col) = cur.expect_token("channel source <node>:<port>")?;
                let from = parse_endpoint(from, from_col, &cur)?;
                let (arrow, arrow_col) = cur.expect_token("`->`")?;
                if arrow != "->" {
                    return Err(cur.err(arrow_col, format!("expected `->`, got `{arrow}`")).into());
                }
                let (to, to_col) = cur.expect_token("channel target <node>:<port>")?;
                let to = parse_endpoint(to, to_col, &cur)?;
                channels.push(Channel::new(from, to));
            }
            other => {
                return Err(cur
                    .err(kw_col, format!("unknown directive `{other}`"))
                    .into());
            }
        }
        if let Some((extra, col)) = cur.token() {
            return Err(cur.err(col, format!("unexpected trailing token `{extra}`")).into());
        }
    }

    let topo = Topology::build(name.unwrap_or_default(), nodes, channels)?;
    Ok(topo)
}

/// Serializes a topology into the file format, nodes sorted by id and
/// channels sorted by (from, to).
pub fn serialize_topology(topo: &Topology) -> String {
    let mut out = String::new();
    if !topo.name().is_empty() {
        out.push_str(&format!("name {}\n", topo.name()));
    }
    for (id, kind) in topo.nodes() {
        out.push_str(&format!("node {id} {kind}\n"));
    }
    // `Topology` keeps channels sorted by (from, to) already.
    for ch in topo.channels() {
        out.push_str(&format!(
            "channel {}:{} -> {}:{}\n",
            ch.from.node, ch.from.port, ch.to.node, ch.to.port
        ));
    }
    out
}
