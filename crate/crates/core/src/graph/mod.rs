//! Immutable in-memory knowledge graph.
//!
//! Nodes are kept sorted by id so that a node's position doubles as a dense
//! index for traversal buffers. Edges are undirected for search purposes; the
//! relation strings stay on the edge for rendering.

mod load;
mod snapshot;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use load::{load_graph, load_graph_file, write_csv, ColumnMap};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_VERSION};

pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("missing required column `{0}` in header")]
    MissingColumn(String),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub category: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub relation: String,
    pub display_relation: String,
}

impl Edge {
    /// The endpoint opposite `id`, if the edge touches it.
    pub fn other(&self, id: NodeId) -> Option<NodeId> {
        if self.src == id {
            Some(self.dst)
        } else if self.dst == id {
            Some(self.src)
        } else {
            None
        }
    }

    fn key(&self) -> (NodeId, NodeId, &str) {
        (self.src.min(self.dst), self.src.max(self.dst), self.relation.as_str())
    }
}

/// Case-folds, trims and collapses internal whitespace.
pub fn fold_name(name: &str) -> String {
    let lowered = name.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    slots: HashMap<NodeId, usize>,
    edges: Vec<Edge>,
    // per node slot: (neighbor slot, edge index), ascending by neighbor then edge
    adjacency: Vec<Vec<(usize, usize)>>,
    name_index: HashMap<String, Vec<NodeId>>,
}

impl KnowledgeGraph {
    /// Builds a graph from explicit parts.
    ///
    /// Edges are canonicalised: orientation is normalised to `src < dst`,
    /// duplicates per `(endpoints, relation)` collapse to one edge, and self
    /// loops are dropped. When duplicates disagree on `display_relation` the
    /// lexicographically smallest one is kept so that input order never
    /// matters.
    pub fn from_parts(mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        nodes.sort_by_key(|n| n.id);
        for pair in nodes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GraphError::Invalid(format!("duplicate node id {}", pair[0].id)));
            }
        }
        if let Some(n) = nodes.iter().find(|n| n.name.trim().is_empty()) {
            return Err(GraphError::Invalid(format!("node {} has an empty name", n.id)));
        }
        let slots: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let mut canon: Vec<Edge> = Vec::with_capacity(edges.len());
        for e in edges {
            if !slots.contains_key(&e.src) {
                return Err(GraphError::UnknownNode(e.src));
            }
            if !slots.contains_key(&e.dst) {
                return Err(GraphError::UnknownNode(e.dst));
            }
            if e.src == e.dst {
                continue;
            }
            let display = if e.display_relation.is_empty() { e.relation.clone() } else { e.display_relation };
            canon.push(Edge {
                src: e.src.min(e.dst),
                dst: e.src.max(e.dst),
                relation: e.relation,
                display_relation: display,
            });
        }
        canon.sort_by(|a, b| a.key().cmp(&b.key()).then_with(|| a.display_relation.cmp(&b.display_relation)));
        canon.dedup_by(|later, kept| later.key() == kept.key());

        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (ei, e) in canon.iter().enumerate() {
            let (s, d) = (slots[&e.src], slots[&e.dst]);
            adjacency[s].push((d, ei));
            adjacency[d].push((s, ei));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        let mut name_index: HashMap<String, Vec<NodeId>> = HashMap::new();
        for n in &nodes {
            name_index.entry(fold_name(&n.name)).or_default().push(n.id);
        }

        Ok(Self { nodes, slots, edges: canon, adjacency, name_index })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// All nodes in ascending id order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots.get(&id).map(|&s| &self.nodes[s])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slots.contains_key(&id)
    }

    /// Exact lookup on the folded name. Ties resolve to the smallest id.
    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.name_index.get(&fold_name(name)).and_then(|ids| ids.first()).and_then(|id| self.node(*id))
    }

    /// Neighbors of `id` in ascending neighbor id order, with the connecting
    /// edge. Parallel edges (different relations) yield one entry each.
    pub fn neighbors(&self, id: NodeId) -> Result<Vec<(&Node, &Edge)>, GraphError> {
        let slot = self.slot(id)?;
        Ok(self.adjacency[slot].iter().map(|&(n, e)| (&self.nodes[n], &self.edges[e])).collect())
    }

    pub(crate) fn slot(&self, id: NodeId) -> Result<usize, GraphError> {
        self.slots.get(&id).copied().ok_or(GraphError::UnknownNode(id))
    }

    pub(crate) fn node_at(&self, slot: usize) -> &Node {
        &self.nodes[slot]
    }

    pub(crate) fn adjacency_at(&self, slot: usize) -> &[(usize, usize)] {
        &self.adjacency[slot]
    }

    pub(crate) fn edge_at(&self, index: usize) -> &Edge {
        &self.edges[index]
    }

    /// Stable digest of node ids and names; used to detect stale indexes.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.id.to_le_bytes());
            h.update(n.name.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..16])
    }
}
