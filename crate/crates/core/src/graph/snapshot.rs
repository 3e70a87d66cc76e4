//! Binary snapshot of a loaded graph.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   "KGCOTSNP"          8 bytes
//! version u32
//! nodes   u64, then per node: id u32, name, category, source
//! edges   u64, then per edge: src u32, dst u32, relation, display_relation
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::io::{Read, Write};

use super::{Edge, GraphError, KnowledgeGraph, Node};

const MAGIC: &[u8; 8] = b"KGCOTSNP";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(graph: &KnowledgeGraph, mut w: W) -> Result<(), GraphError> {
    w.write_all(MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(graph.node_count() as u64).to_le_bytes())?;
    for n in graph.nodes() {
        w.write_all(&n.id.to_le_bytes())?;
        write_str(&mut w, &n.name)?;
        write_str(&mut w, &n.category)?;
        write_str(&mut w, &n.source)?;
    }
    w.write_all(&(graph.edge_count() as u64).to_le_bytes())?;
    for e in graph.edges() {
        w.write_all(&e.src.to_le_bytes())?;
        w.write_all(&e.dst.to_le_bytes())?;
        write_str(&mut w, &e.relation)?;
        write_str(&mut w, &e.display_relation)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<KnowledgeGraph, GraphError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GraphError::Snapshot("not a graph snapshot".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SNAPSHOT_VERSION {
        return Err(GraphError::Snapshot(format!("unsupported snapshot version {version}")));
    }
    let n_nodes = read_u64(&mut r)?;
    let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20) as usize);
    for _ in 0..n_nodes {
        let id = read_u32(&mut r)?;
        nodes.push(Node { id, name: read_str(&mut r)?, category: read_str(&mut r)?, source: read_str(&mut r)? });
    }
    let n_edges = read_u64(&mut r)?;
    let mut edges = Vec::with_capacity(n_edges.min(1 << 20) as usize);
    for _ in 0..n_edges {
        let src = read_u32(&mut r)?;
        let dst = read_u32(&mut r)?;
        edges.push(Edge { src, dst, relation: read_str(&mut r)?, display_relation: read_str(&mut r)? });
    }
    KnowledgeGraph::from_parts(nodes, edges)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, GraphError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| GraphError::Snapshot("invalid UTF-8 string".into()))
}
