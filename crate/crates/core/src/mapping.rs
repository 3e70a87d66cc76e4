//! Entity extraction and linking to graph nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_index::{CandidateSet, Index, IndexError};
use crate::graph::{fold_name, KnowledgeGraph, NodeId};
use crate::llm::{
    with_correction, ChatGateway, ChatRequest, EmbedGateway, GatewayError, Slots, TemplateError, TemplateId,
    TemplateSet,
};

#[derive(Debug, Error)]
pub enum MapError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(IndexError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("extraction reply could not be parsed: {reply:?}")]
    Unparseable { reply: String },
    #[error("question text is empty")]
    EmptyQuestion,
}

impl From<IndexError> for MapError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Query(g) | IndexError::Batch { source: g, .. } => MapError::Gateway(g),
            other => MapError::Index(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Question,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub origin: Origin,
    pub ordinal: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exact,
    Similarity,
    LlmSelected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedEntity {
    pub mention: EntityMention,
    pub node: NodeId,
    pub node_name: String,
    pub stage: Stage,
    /// Cosine score; set only for the similarity stage.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmappedReason {
    NoCandidates,
    SelectionRejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmappedMention {
    pub mention: EntityMention,
    pub reason: UnmappedReason,
    /// Last selection reply, if the LLM was asked.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapOutcome {
    Mapped(MappedEntity),
    Unmapped(UnmappedMention),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub tau: f64,
    pub k_candidates: usize,
    /// Mentions kept per origin.
    pub max_mentions: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { tau: 0.85, k_candidates: 10, max_mentions: 16 }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(format!("mapping.tau must lie strictly between 0 and 1, got {}", self.tau));
        }
        if self.k_candidates < 1 {
            return Err("mapping.k_candidates must be at least 1".into());
        }
        if self.max_mentions < 1 {
            return Err("mapping.max_mentions must be at least 1".into());
        }
        Ok(())
    }
}

/// Splits an extraction reply into (question entities, answer entities).
pub fn parse_extraction(reply: &str) -> Option<(Vec<String>, Vec<String>)> {
    let text = reply.trim();
    let (q, a) = text.split_once('∥').or_else(|| text.split_once("||"))?;
    if a.contains('∥') || a.contains("||") {
        return None;
    }
    Some((split_entities(q), split_entities(a)))
}

fn split_entities(side: &str) -> Vec<String> {
    side.split([';', '\n'])
        .map(|s| {
            s.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim()
                .trim_matches(['"', '\'', '`'])
                .trim_end_matches('.')
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty() && !matches!(s.to_lowercase().as_str(), "none" | "n/a"))
        .collect()
}

fn mentions_for(origin: Origin, surfaces: Vec<String>, cap: usize) -> Vec<EntityMention> {
    let mut seen = std::collections::HashSet::new();
    surfaces
        .into_iter()
        .filter(|s| seen.insert(fold_name(s)))
        .take(cap)
        .enumerate()
        .map(|(ordinal, surface)| EntityMention { surface, origin, ordinal })
        .collect()
}

/// Asks the LLM for question and answer entities. One corrective re-prompt
/// when the reply lacks the separator.
pub fn extract_entities(
    question: &str,
    answer: &str,
    max_mentions: usize,
    chat: &ChatGateway,
    templates: &TemplateSet,
) -> Result<Vec<EntityMention>, MapError> {
    if question.trim().is_empty() {
        return Err(MapError::EmptyQuestion);
    }
    let prompt =
        templates.render(TemplateId::Extraction, &Slots::new().with("question", question).with("answer", answer))?;
    let mut reply = chat.chat(&ChatRequest::new(TemplateId::Extraction, prompt.clone()))?;
    let mut parsed = parse_extraction(&reply);
    if parsed.is_none() {
        let retry = with_correction(&prompt, "expected question entities, the separator ∥, then answer entities");
        reply = chat.chat(&ChatRequest::new(TemplateId::Extraction, retry))?;
        parsed = parse_extraction(&reply);
    }
    let (q, mut a) = parsed.ok_or(MapError::Unparseable { reply })?;
    if answer.trim().is_empty() {
        a.clear();
    }
    let mut out = mentions_for(Origin::Question, q, max_mentions);
    out.extend(mentions_for(Origin::Answer, a, max_mentions));
    Ok(out)
}

/// Outcome of the score-only stages over one candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Index into the candidate set of the first case-folded name match.
    Exact(usize),
    /// The top candidate clears the threshold.
    Similar,
    /// Neither applies; ask the LLM.
    Select,
}

/// Exact match wins over any score; otherwise the top candidate must beat
/// `tau` strictly.
pub fn decide(surface: &str, set: &CandidateSet, tau: f64) -> Decision {
    let folded = fold_name(surface);
    if let Some(i) = set.entries.iter().position(|c| fold_name(&c.name) == folded) {
        return Decision::Exact(i);
    }
    match set.top() {
        Some(c) if c.score > tau => Decision::Similar,
        _ => Decision::Select,
    }
}

fn render_candidates(set: &CandidateSet) -> String {
    set.entries.iter().map(|c| format!("- {}", c.name)).collect::<Vec<_>>().join("\n")
}

fn pick_candidate(reply: &str, set: &CandidateSet) -> Option<usize> {
    let line = reply.trim().lines().next().unwrap_or("").trim();
    let line = line.trim_start_matches(['-', '*']).trim().trim_matches(['"', '\'', '`']).trim_end_matches('.');
    let folded = fold_name(line);
    set.entries.iter().position(|c| fold_name(&c.name) == folded)
}

/// Everything the mapper reads.
pub struct Mapper<'a> {
    pub graph: &'a KnowledgeGraph,
    pub index: &'a Index,
    pub chat: &'a ChatGateway,
    pub embed: &'a EmbedGateway,
    pub templates: &'a TemplateSet,
    pub cfg: MappingConfig,
}

/// Result of mapping all mentions of one QA pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub mapped: Vec<MappedEntity>,
    pub unmapped: Vec<UnmappedMention>,
}

impl Mapping {
    fn nodes(&self, origin: Origin) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.mapped.iter().filter(|m| m.mention.origin == origin).map(|m| m.node).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn question_nodes(&self) -> Vec<NodeId> {
        self.nodes(Origin::Question)
    }

    pub fn answer_nodes(&self) -> Vec<NodeId> {
        self.nodes(Origin::Answer)
    }

    /// Either side has no mapped node.
    pub fn is_incomplete(&self) -> bool {
        self.question_nodes().is_empty() || self.answer_nodes().is_empty()
    }
}

impl Mapper<'_> {
    fn exact(&self, mention: &EntityMention, node: NodeId) -> MapOutcome {
        let name = self.graph.node(node).map(|n| n.name.clone()).unwrap_or_default();
        MapOutcome::Mapped(MappedEntity {
            mention: mention.clone(),
            node,
            node_name: name,
            stage: Stage::Exact,
            score: None,
        })
    }

    pub fn map_entity(&self, mention: &EntityMention, question: &str, answer: &str) -> Result<MapOutcome, MapError> {
        if let Some(n) = self.graph.node_by_name(&mention.surface) {
            return Ok(self.exact(mention, n.id));
        }
        let set = match self.index.top_k(&mention.surface, self.cfg.k_candidates, self.embed) {
            Ok(s) => s,
            Err(IndexError::Empty) => {
                return Ok(MapOutcome::Unmapped(UnmappedMention {
                    mention: mention.clone(),
                    reason: UnmappedReason::NoCandidates,
                    reply: None,
                }))
            }
            Err(e) => return Err(e.into()),
        };
        match decide(&mention.surface, &set, self.cfg.tau) {
            Decision::Exact(i) => Ok(self.exact(mention, set.entries[i].node)),
            Decision::Similar => {
                let top = &set.entries[0];
                Ok(MapOutcome::Mapped(MappedEntity {
                    mention: mention.clone(),
                    node: top.node,
                    node_name: top.name.clone(),
                    stage: Stage::Similarity,
                    score: Some(top.score),
                }))
            }
            Decision::Select => self.select(mention, &set, question, answer),
        }
    }

    fn select(
        &self,
        mention: &EntityMention,
        set: &CandidateSet,
        question: &str,
        answer: &str,
    ) -> Result<MapOutcome, MapError> {
        let prompt = self.templates.render(
            TemplateId::Select,
            &Slots::new()
                .with("entity", mention.surface.as_str())
                .with("candidates", render_candidates(set))
                .with("question", question)
                .with("answer", answer),
        )?;
        let mut reply = self.chat.chat(&ChatRequest::new(TemplateId::Select, prompt.clone()))?;
        let mut pick = pick_candidate(&reply, set);
        if pick.is_none() {
            let retry = with_correction(&prompt, "the reply did not name one of the listed candidates");
            reply = self.chat.chat(&ChatRequest::new(TemplateId::Select, retry))?;
            pick = pick_candidate(&reply, set);
        }
        Ok(match pick {
            Some(i) => MapOutcome::Mapped(MappedEntity {
                mention: mention.clone(),
                node: set.entries[i].node,
                node_name: set.entries[i].name.clone(),
                stage: Stage::LlmSelected,
                score: None,
            }),
            None => MapOutcome::Unmapped(UnmappedMention {
                mention: mention.clone(),
                reason: UnmappedReason::SelectionRejected,
                reply: Some(reply),
            }),
        })
    }

    /// Maps every mention; a node already mapped from the same origin is not
    /// listed twice.
    pub fn map_all(&self, mentions: &[EntityMention], question: &str, answer: &str) -> Result<Mapping, MapError> {
        let mut out = Mapping::default();
        for m in mentions {
            match self.map_entity(m, question, answer)? {
                MapOutcome::Mapped(e) => {
                    let dup = out.mapped.iter().any(|x| x.mention.origin == e.mention.origin && x.node == e.node);
                    if !dup {
                        out.mapped.push(e);
                    }
                }
                MapOutcome::Unmapped(u) => out.unmapped.push(u),
            }
        }
        Ok(out)
    }
}
