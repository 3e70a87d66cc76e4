//! Shortest reasoning paths between question and answer nodes.

use std::collections::VecDeque;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, KnowledgeGraph, Node, NodeId};
use crate::llm::{
    with_correction, ChatGateway, ChatRequest, GatewayError, Slots, TemplateError, TemplateId, TemplateSet,
};

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("path cap must be at least 1")]
    ZeroCap,
    #[error("path limit k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Alternating node/relation sequence from a question node to an answer node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub nodes: Vec<NodeId>,
    pub names: Vec<String>,
    pub relations: Vec<String>,
    /// (question node, answer node)
    pub pair: (NodeId, NodeId),
}

impl ReasoningPath {
    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    /// `a —rel→ b —rel→ c`
    pub fn render(&self) -> String {
        let mut out = self.names[0].clone();
        for (rel, name) in self.relations.iter().zip(&self.names[1..]) {
            out.push_str(&format!(" —{rel}→ {name}"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStatus {
    Connected,
    Disconnected,
    IdenticalEndpoints,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortestPaths {
    pub status: PairStatus,
    pub paths: Vec<ReasoningPath>,
    /// More shortest paths exist than the cap allowed.
    pub truncated: bool,
}

/// Every shortest path from `src` to `dst`, in lexicographic node-id order,
/// at most `cap` of them.
///
/// Breadth-first layering from `src` gives distances; walking back from
/// `dst` through strictly decreasing layers marks the shortest-path DAG; a
/// depth-first walk over that DAG in ascending neighbor order then yields the
/// node sequences. Parallel edges with different relations give distinct
/// paths; paths sharing a node sequence are ordered by relation name.
pub fn all_shortest_paths(
    graph: &KnowledgeGraph,
    src: NodeId,
    dst: NodeId,
    cap: usize,
) -> Result<ShortestPaths, PathError> {
    if cap == 0 {
        return Err(PathError::ZeroCap);
    }
    let s = graph.slot(src)?;
    let t = graph.slot(dst)?;
    if s == t {
        let n = graph.node_at(s);
        return Ok(ShortestPaths {
            status: PairStatus::IdenticalEndpoints,
            paths: vec![ReasoningPath {
                nodes: vec![n.id],
                names: vec![n.name.clone()],
                relations: Vec::new(),
                pair: (src, dst),
            }],
            truncated: false,
        });
    }

    const UNSEEN: u32 = u32::MAX;
    let n = graph.node_count();
    let mut dist = vec![UNSEEN; n];
    dist[s] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        if dist[t] != UNSEEN && dist[v] >= dist[t] {
            break;
        }
        for &(w, _) in graph.adjacency_at(v) {
            if dist[w] == UNSEEN {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    if dist[t] == UNSEEN {
        return Ok(ShortestPaths { status: PairStatus::Disconnected, paths: Vec::new(), truncated: false });
    }

    let mut on_dag = vec![false; n];
    on_dag[t] = true;
    let mut stack = vec![t];
    while let Some(v) = stack.pop() {
        for &(w, _) in graph.adjacency_at(v) {
            if !on_dag[w] && dist[w] != UNSEEN && dist[w] + 1 == dist[v] {
                on_dag[w] = true;
                stack.push(w);
            }
        }
    }

    let mut paths = Vec::new();
    let mut frames: Vec<(usize, usize)> = vec![(s, 0)];
    while let Some(frame) = frames.last_mut() {
        let v = frame.0;
        if v == t {
            let slots: Vec<usize> = frames.iter().map(|f| f.0).collect();
            if !expand(graph, &slots, (src, dst), cap, &mut paths) {
                return Ok(ShortestPaths { status: PairStatus::Connected, paths, truncated: true });
            }
            frames.pop();
            continue;
        }
        let adj = graph.adjacency_at(v);
        let mut next = None;
        while frame.1 < adj.len() {
            let (w, _) = adj[frame.1];
            frame.1 += 1;
            // Parallel edges are expanded per node sequence, so each
            // neighbor is entered once.
            if frame.1 >= 2 && adj[frame.1 - 2].0 == w {
                continue;
            }
            if on_dag[w] && dist[w] == dist[v] + 1 {
                next = Some(w);
                break;
            }
        }
        match next {
            Some(w) => frames.push((w, 0)),
            None => {
                frames.pop();
            }
        }
    }
    Ok(ShortestPaths { status: PairStatus::Connected, paths, truncated: false })
}

/// Pushes one path per combination of parallel edges along the node
/// sequence `slots`, ordered by edge index (relation name) hop by hop.
/// Returns false once `cap` would be exceeded.
fn expand(
    graph: &KnowledgeGraph,
    slots: &[usize],
    pair: (NodeId, NodeId),
    cap: usize,
    out: &mut Vec<ReasoningPath>,
) -> bool {
    let choices: Vec<Vec<usize>> = slots
        .windows(2)
        .map(|w| graph.adjacency_at(w[0]).iter().filter(|&&(n, _)| n == w[1]).map(|&(_, e)| e).collect())
        .collect();
    let nodes: Vec<&Node> = slots.iter().map(|&slot| graph.node_at(slot)).collect();
    let mut pick = vec![0usize; choices.len()];
    loop {
        if out.len() == cap {
            return false;
        }
        out.push(ReasoningPath {
            nodes: nodes.iter().map(|n| n.id).collect(),
            names: nodes.iter().map(|n| n.name.clone()).collect(),
            relations: pick.iter().zip(&choices).map(|(&i, c)| graph.edge_at(c[i]).display_relation.clone()).collect(),
            pair,
        });
        let mut hop = choices.len();
        loop {
            if hop == 0 {
                return true;
            }
            hop -= 1;
            pick[hop] += 1;
            if pick[hop] < choices[hop].len() {
                break;
            }
            pick[hop] = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pruned {
    pub paths: Vec<ReasoningPath>,
    /// No usable selection came back, so the first `k` paths were kept.
    pub fallback: bool,
    pub llm_calls: usize,
}

/// Numbered `n. a —rel→ b` lines, 1-based.
pub fn render_numbered(paths: &[ReasoningPath]) -> String {
    paths.iter().enumerate().map(|(i, p)| format!("{}. {}", i + 1, p.render())).collect::<Vec<_>>().join("\n")
}

/// Distinct valid 1-based indices in reply order, at most `k`.
fn parse_selection(reply: &str, n: usize, k: usize) -> Vec<usize> {
    let re = Regex::new(r"\d+").expect("static regex");
    let mut picked: Vec<usize> = Vec::new();
    for m in re.find_iter(reply) {
        if picked.len() == k {
            break;
        }
        if let Ok(i) = m.as_str().parse::<usize>() {
            if (1..=n).contains(&i) && !picked.contains(&(i - 1)) {
                picked.push(i - 1);
            }
        }
    }
    picked
}

/// Asks the LLM to keep at most `k` of `paths`. At or under capacity the
/// input is returned untouched without a call.
pub fn prune_paths(
    paths: &[ReasoningPath],
    question: &str,
    k: usize,
    chat: &ChatGateway,
    templates: &TemplateSet,
) -> Result<Pruned, PathError> {
    if k == 0 {
        return Err(PathError::ZeroK);
    }
    if paths.len() <= k {
        return Ok(Pruned { paths: paths.to_vec(), fallback: false, llm_calls: 0 });
    }
    let prompt = templates.render(
        TemplateId::Prune,
        &Slots::new().with("paths", render_numbered(paths)).with("question", question).with("limit", k.to_string()),
    )?;
    let mut request = ChatRequest::new(TemplateId::Prune, prompt.clone());
    for attempt in 0..2 {
        let reply = chat.chat(&request)?;
        let mut picked = parse_selection(&reply, paths.len(), k);
        if !picked.is_empty() {
            picked.sort_unstable();
            return Ok(Pruned {
                paths: picked.into_iter().map(|i| paths[i].clone()).collect(),
                fallback: false,
                llm_calls: attempt + 1,
            });
        }
        request = ChatRequest::new(
            TemplateId::Prune,
            with_correction(&prompt, &format!("no valid path number between 1 and {}", paths.len())),
        );
    }
    Ok(Pruned { paths: paths[..k].to_vec(), fallback: true, llm_calls: 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Paths kept per (question node, answer node) pair after pruning.
    pub k: usize,
    /// Raw shortest paths enumerated per pair before pruning.
    pub cap: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { k: 3, cap: 64 }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 {
            return Err("paths.k must be at least 1".into());
        }
        if self.cap < 1 {
            return Err("paths.cap must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairReport {
    pub question: NodeId,
    pub answer: NodeId,
    pub status: PairStatus,
    /// Shortest paths found before pruning.
    pub found: usize,
    pub truncated: bool,
    pub kept: usize,
    pub fallback: bool,
}

/// Pruned paths across all question × answer node pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathBundle {
    pub paths: Vec<ReasoningPath>,
    pub pairs: Vec<PairReport>,
}

impl PathBundle {
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn connected_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.status == PairStatus::Connected).count()
    }
}

/// Runs search and pruning for every pair, ascending by question node id and
/// then answer node id. Pairs whose endpoints coincide are recorded but
/// contribute no path.
pub fn collect_paths(
    question_nodes: &[NodeId],
    answer_nodes: &[NodeId],
    graph: &KnowledgeGraph,
    question: &str,
    cfg: &PathConfig,
    chat: &ChatGateway,
    templates: &TemplateSet,
) -> Result<PathBundle, PathError> {
    let sorted = |ids: &[NodeId]| {
        let mut v = ids.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut bundle = PathBundle::default();
    for &q in &sorted(question_nodes) {
        for &a in &sorted(answer_nodes) {
            let found = all_shortest_paths(graph, q, a, cfg.cap)?;
            let mut report = PairReport {
                question: q,
                answer: a,
                status: found.status,
                found: found.paths.len(),
                truncated: found.truncated,
                kept: 0,
                fallback: false,
            };
            if found.status == PairStatus::Connected {
                let pruned = prune_paths(&found.paths, question, cfg.k, chat, templates)?;
                report.kept = pruned.paths.len();
                report.fallback = pruned.fallback;
                bundle.paths.extend(pruned.paths);
            }
            if found.truncated {
                log::info!("pair ({q}, {a}): shortest paths truncated at {}", cfg.cap);
            }
            bundle.pairs.push(report);
        }
    }
    Ok(bundle)
}
