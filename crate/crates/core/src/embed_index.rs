//! Dense-vector index over node names with exact top-K cosine search.
//!
//! # Persisted format (version 1, little-endian)
//!
//! ```text
//! magic        "KGCOTIDX"        8 bytes
//! version      u32
//! embedder id  u32 length + UTF-8
//! graph digest u32 length + UTF-8   (KnowledgeGraph::fingerprint)
//! dimension    u32
//! node count   u64
//! rows         node count × dimension f32, ascending node id
//! ```

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{KnowledgeGraph, NodeId};
use crate::llm::{EmbedGateway, GatewayError};

const MAGIC: &[u8; 8] = b"KGCOTIDX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("embedding batch {batch} failed: {source}")]
    Batch { batch: usize, source: GatewayError },
    #[error("embedding query failed: {0}")]
    Query(GatewayError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("similarity undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("empty index")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-length vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity computed in f64, clamped to [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, IndexError> {
    if u.dim() != v.dim() {
        return Err(IndexError::DimensionMismatch { expected: u.dim(), got: v.dim() });
    }
    let (nu, nv) = (norm(&u.0), norm(&v.0));
    if nu == 0.0 || nv == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok(scaled(dot(&u.0, &v.0), nu, nv))
}

fn scaled(dot: f64, nu: f64, nv: f64) -> f64 {
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node: NodeId,
    pub name: String,
    pub score: f64,
}

/// Top-K candidates for one query, best first; ties by ascending node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: String,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn top(&self) -> Option<&Candidate> {
        self.entries.first()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

fn rank(a: &(f64, NodeId), b: &(f64, NodeId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

pub struct Index {
    embedder_id: String,
    graph_digest: String,
    dim: usize,
    nodes: Vec<(NodeId, String)>,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl std::fmt::Debug for Index {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Index")
            .field("embedder_id", &self.embedder_id)
            .field("dim", &self.dim)
            .field("len", &self.nodes.len())
            .finish()
    }
}

/// Embeds every node name, `batch_size` names per gateway call, with up to
/// the gateway's in-flight limit of batches running at once.
pub fn build_index(graph: &KnowledgeGraph, embedder: &EmbedGateway) -> Result<Index, IndexError> {
    let names: Vec<String> = graph.nodes().iter().map(|n| n.name.clone()).collect();
    let batches: Vec<&[String]> = names.chunks(embedder.batch_size()).collect();
    let results: Mutex<Vec<Option<Vec<crate::embed_index::EmbeddingVector>>>> = Mutex::new(vec![None; batches.len()]);
    let failure: Mutex<Option<IndexError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let workers = embedder.in_flight_limit().min(batches.len()).max(1);

    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let b = next.fetch_add(1, AtomicOrdering::SeqCst);
                if b >= batches.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                match embedder.embed(batches[b]) {
                    Ok(vs) => results.lock().unwrap()[b] = Some(vs),
                    Err(e) => {
                        let mut f = failure.lock().unwrap();
                        let replace = match f.as_ref() {
                            Some(IndexError::Batch { batch, .. }) => b + 1 < *batch,
                            _ => true,
                        };
                        if replace {
                            *f = Some(IndexError::Batch { batch: b + 1, source: e });
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let mut dim = None;
    let mut data = Vec::new();
    let mut norms = Vec::with_capacity(names.len());
    for batch in results.into_inner().unwrap().into_iter().map(|b| b.expect("all batches done")) {
        for v in batch {
            let expected = *dim.get_or_insert(v.dim());
            if v.dim() != expected {
                return Err(IndexError::DimensionMismatch { expected, got: v.dim() });
            }
            let n = norm(v.as_slice());
            if n == 0.0 {
                return Err(IndexError::ZeroVector);
            }
            norms.push(n);
            data.extend_from_slice(v.as_slice());
        }
    }
    Ok(Index {
        embedder_id: embedder.embedder_id(),
        graph_digest: graph.fingerprint(),
        dim: dim.unwrap_or(0),
        nodes: graph.nodes().iter().map(|n| (n.id, n.name.clone())).collect(),
        data,
        norms,
    })
}

impl Index {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Embeds `text` and scans the whole index.
    pub fn top_k(&self, text: &str, k: usize, embedder: &EmbedGateway) -> Result<CandidateSet, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        let q = embedder.embed(&[text.to_string()]).map_err(IndexError::Query)?;
        self.top_k_vector(text, &q[0], k)
    }

    /// Exact scan against a precomputed query vector.
    pub fn top_k_vector(&self, text: &str, query: &EmbeddingVector, k: usize) -> Result<CandidateSet, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: query.dim() });
        }
        let qn = norm(query.as_slice());
        if qn == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let mut scored: Vec<(f64, NodeId, usize)> = (0..self.nodes.len())
            .map(|i| (scaled(dot(query.as_slice(), self.row(i)), qn, self.norms[i]), self.nodes[i].0, i))
            .collect();
        let k = k.min(scored.len());
        let cmp = |a: &(f64, NodeId, usize), b: &(f64, NodeId, usize)| rank(&(a.0, a.1), &(b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(CandidateSet {
            query: text.to_string(),
            entries: scored
                .into_iter()
                .map(|(score, node, i)| Candidate { node, name: self.nodes[i].1.clone(), score })
                .collect(),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        for s in [&self.embedder_id, &self.graph_digest] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.nodes.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a persisted index and attaches node names from `graph`, which
    /// must be the graph the index was built from.
    pub fn read_from<R: Read>(mut r: R, graph: &KnowledgeGraph) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::Format("not an index file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported index version {version}")));
        }
        let embedder_id = read_str(&mut r)?;
        let graph_digest = read_str(&mut r)?;
        if graph_digest != graph.fingerprint() {
            return Err(IndexError::Format("index was built from a different graph".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        if count != graph.node_count() {
            return Err(IndexError::Format(format!("index has {count} rows, graph has {} nodes", graph.node_count())));
        }
        let mut bytes = vec![0u8; count * dim * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        let norms: Vec<f64> = data.chunks(dim.max(1)).take(count).map(norm).collect();
        if norms.contains(&0.0) {
            return Err(IndexError::ZeroVector);
        }
        Ok(Self {
            embedder_id,
            graph_digest,
            dim,
            nodes: graph.nodes().iter().map(|n| (n.id, n.name.clone())).collect(),
            data,
            norms,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| IndexError::Format("invalid UTF-8".into()))
}
