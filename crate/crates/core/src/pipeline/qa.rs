//! Question/answer input records.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldAnswer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPair {
    pub id: String,
    pub source: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<AnswerOption>>,
    pub answer: GoldAnswer,
    /// Only `train` is accepted when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl QaPair {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.source.trim().is_empty() {
            return Err("source is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if let Some(split) = &self.split {
            if split != "train" {
                return Err(format!("split `{split}` is not allowed; only training data may be used"));
            }
        }
        match &self.options {
            Some(options) => {
                if options.is_empty() {
                    return Err("options list is empty".into());
                }
                let mut seen = HashSet::new();
                for o in options {
                    if o.label.trim().is_empty() || o.text.trim().is_empty() {
                        return Err("option with empty label or text".into());
                    }
                    if !seen.insert(o.label.to_lowercase()) {
                        return Err(format!("duplicate option label `{}`", o.label));
                    }
                }
                let label = self.answer.label.as_deref().ok_or("answer.label is required when options are given")?;
                if self.option(label).is_none() {
                    return Err(format!("answer label `{label}` is not one of the option labels"));
                }
            }
            None => {
                if self.answer.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return Err("answer.text is required when no options are given".into());
                }
            }
        }
        Ok(())
    }

    pub fn option(&self, label: &str) -> Option<&AnswerOption> {
        self.options.as_ref()?.iter().find(|o| o.label.eq_ignore_ascii_case(label))
    }

    /// Question followed by its labelled options, as shown to the LLM.
    pub fn question_block(&self) -> String {
        match &self.options {
            None => self.question.clone(),
            Some(options) => {
                let mut out = format!("{}\nOptions:", self.question);
                for o in options {
                    out.push_str(&format!("\n{}. {}", o.label, o.text));
                }
                out
            }
        }
    }

    /// Gold answer as prose: the option text for a labelled answer, else the
    /// answer text.
    pub fn answer_text(&self) -> String {
        if let Some(o) = self.answer.label.as_deref().and_then(|l| self.option(l)) {
            return o.text.clone();
        }
        self.answer.text.clone().unwrap_or_default()
    }
}

/// Reads and validates a JSONL file of QA pairs. Blank lines are skipped;
/// errors carry the 1-based line number.
pub fn read_qa_pairs<R: BufRead>(reader: R) -> Result<Vec<QaPair>, QaError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| QaError::Invalid { line: line_no, message };
        let pair: QaPair = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        pair.validate().map_err(invalid)?;
        if !ids.insert(pair.id.clone()) {
            return Err(invalid(format!("duplicate id `{}`", pair.id)));
        }
        out.push(pair);
    }
    Ok(out)
}
