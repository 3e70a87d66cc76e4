//! Per-pair output records.

use serde::{Deserialize, Serialize};

use super::qa::{AnswerOption, GoldAnswer, QaPair};
use crate::mapping::{EntityMention, Mapping};
use crate::paths::PathBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Generated,
    Retained,
    Rejected,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    NoEntities,
    NoMapping,
    NoPaths,
    LlmFailure,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoEntities => "no-entities",
            ExclusionReason::NoMapping => "no-mapping",
            ExclusionReason::NoPaths => "no-paths",
            ExclusionReason::LlmFailure => "llm-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    /// Raw answer segment from the eval reply.
    pub predicted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    pub matched: bool,
    pub parse_failure: bool,
}

/// Full trace of one QA pair, written to the audit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    #[serde(flatten)]
    pub qa: QaPair,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ExclusionReason>,
    /// Human-readable context for an exclusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub mentions: Vec<EntityMention>,
    pub mapping: Mapping,
    pub bundle: PathBundle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

impl CotRecord {
    pub fn new(qa: QaPair) -> Self {
        Self {
            qa,
            status: Status::Generated,
            reason: None,
            detail: None,
            mentions: Vec::new(),
            mapping: Mapping::default(),
            bundle: PathBundle::default(),
            cot: None,
            verdict: None,
        }
    }

    pub fn exclude(mut self, reason: ExclusionReason, detail: impl Into<String>) -> Self {
        self.status = Status::Excluded;
        self.reason = Some(reason);
        self.detail = Some(detail.into());
        self
    }

    /// Checks the status/verdict coupling.
    pub fn is_consistent(&self) -> bool {
        match self.status {
            Status::Retained => self.verdict.as_ref().is_some_and(|v| v.matched) && self.reason.is_none(),
            Status::Rejected => self.verdict.as_ref().is_some_and(|v| !v.matched) && self.reason.is_none(),
            Status::Excluded => self.reason.is_some(),
            Status::Generated => self.cot.is_some() && self.reason.is_none(),
        }
    }
}

/// Retained record in the training-data output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub id: String,
    pub source: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<AnswerOption>>,
    pub answer: GoldAnswer,
    pub reasoning: String,
}

impl FilteredRecord {
    /// `None` unless the record was retained.
    pub fn from_record(r: &CotRecord) -> Option<Self> {
        if r.status != Status::Retained {
            return None;
        }
        Some(Self {
            id: r.qa.id.clone(),
            source: r.qa.source.clone(),
            question: r.qa.question.clone(),
            options: r.qa.options.clone(),
            answer: r.qa.answer.clone(),
            reasoning: r.cot.clone()?,
        })
    }
}
