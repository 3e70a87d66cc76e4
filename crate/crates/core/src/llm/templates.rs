//! Prompt templates.
//!
//! Each template is a text asset whose first line is a header of the form
//! `kgcot-template <id>/<version>`; the rest of the file is the body.
//! Placeholders are written `{{slot}}`. Every template must reference all of
//! its slots and nothing else, so an override cannot silently drop an input
//! or pull in one it is not entitled to (the eval template has no slot for the
//! gold answer at all).

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TemplateId;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}`: missing slot `{slot}`")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("template `{template}`: slot `{slot}` must not be empty")]
    EmptySlot { template: TemplateId, slot: String },
    #[error("template `{template}`: unknown placeholder `{{{{{slot}}}}}`")]
    UnknownPlaceholder { template: TemplateId, slot: String },
    #[error("template `{template}`: body never uses slot `{slot}`")]
    UnusedSlot { template: TemplateId, slot: String },
    #[error("template header: {0}")]
    Header(String),
    #[error("template file {path}: {message}")]
    Io { path: String, message: String },
}

struct SlotSpec {
    name: &'static str,
    may_be_empty: bool,
}

const fn slot(name: &'static str, may_be_empty: bool) -> SlotSpec {
    SlotSpec { name, may_be_empty }
}

impl TemplateId {
    fn slot_spec(self) -> &'static [SlotSpec] {
        const EXTRACTION: &[SlotSpec] = &[slot("question", false), slot("answer", true)];
        const SELECT: &[SlotSpec] =
            &[slot("entity", false), slot("candidates", false), slot("question", false), slot("answer", true)];
        const PRUNE: &[SlotSpec] = &[slot("paths", false), slot("question", false), slot("limit", false)];
        const GENERATE: &[SlotSpec] = &[slot("question", false), slot("answer", false), slot("paths", false)];
        const EVAL: &[SlotSpec] = &[slot("question", false), slot("cot", false)];
        match self {
            TemplateId::Extraction => EXTRACTION,
            TemplateId::Select => SELECT,
            TemplateId::Prune => PRUNE,
            TemplateId::Generate => GENERATE,
            TemplateId::Eval => EVAL,
        }
    }

    /// Slot names this template accepts.
    pub fn slots(self) -> Vec<&'static str> {
        self.slot_spec().iter().map(|s| s.name).collect()
    }

    fn default_asset(self) -> &'static str {
        match self {
            TemplateId::Extraction => include_str!("../../templates/extraction.txt"),
            TemplateId::Select => include_str!("../../templates/select.txt"),
            TemplateId::Prune => include_str!("../../templates/prune.txt"),
            TemplateId::Generate => include_str!("../../templates/generate.txt"),
            TemplateId::Eval => include_str!("../../templates/eval.txt"),
        }
    }
}

/// Named text fragments to substitute into a template.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slots(BTreeMap<String, String>);

impl Slots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

enum Part {
    Text(String),
    Slot(String),
}

pub struct Template {
    id: TemplateId,
    version: u32,
    body: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(id: TemplateId, asset: &str) -> Result<Self, TemplateError> {
        let (header, body) = asset.split_once('\n').unwrap_or((asset, ""));
        let rest = header
            .trim()
            .strip_prefix("kgcot-template ")
            .ok_or_else(|| TemplateError::Header(format!("expected `kgcot-template {id}/<version>`")))?;
        let (name, version) =
            rest.split_once('/').ok_or_else(|| TemplateError::Header(format!("malformed header `{header}`")))?;
        if name != id.as_str() {
            return Err(TemplateError::Header(format!("header names `{name}`, expected `{id}`")));
        }
        let version: u32 =
            version.trim().parse().map_err(|_| TemplateError::Header(format!("bad version in `{header}`")))?;

        let spec = id.slot_spec();
        let mut parts = Vec::new();
        let mut rest = body;
        while let Some(start) = rest.find("{{") {
            let Some(len) = rest[start + 2..].find("}}") else { break };
            let name = rest[start + 2..start + 2 + len].trim();
            if !spec.iter().any(|s| s.name == name) {
                return Err(TemplateError::UnknownPlaceholder { template: id, slot: name.into() });
            }
            parts.push(Part::Text(rest[..start].to_string()));
            parts.push(Part::Slot(name.to_string()));
            rest = &rest[start + 2 + len + 2..];
        }
        parts.push(Part::Text(rest.to_string()));
        for s in spec {
            if !parts.iter().any(|p| matches!(p, Part::Slot(n) if n == s.name)) {
                return Err(TemplateError::UnusedSlot { template: id, slot: s.name.into() });
            }
        }
        Ok(Self { id, version, body: body.to_string(), parts })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn render(&self, slots: &Slots) -> Result<String, TemplateError> {
        for s in self.id.slot_spec() {
            let value = slots
                .get(s.name)
                .ok_or_else(|| TemplateError::MissingSlot { template: self.id, slot: s.name.into() })?;
            if !s.may_be_empty && value.trim().is_empty() {
                return Err(TemplateError::EmptySlot { template: self.id, slot: s.name.into() });
            }
        }
        let mut out = String::with_capacity(self.body.len() + 256);
        for p in &self.parts {
            match p {
                Part::Text(t) => out.push_str(t),
                Part::Slot(name) => out.push_str(slots.get(name).unwrap_or_default()),
            }
        }
        Ok(out)
    }
}

/// The five templates in use for a run.
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| (id, Template::parse(id, id.default_asset()).expect("bundled template is valid")))
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    /// Default templates, with any `<id>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        if !dir.is_dir() {
            return Err(TemplateError::Io { path: dir.display().to_string(), message: "not a directory".into() });
        }
        let mut set = Self::default();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
                set.templates.insert(id, Template::parse(id, &text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, slots: &Slots) -> Result<String, TemplateError> {
        self.get(id).render(slots)
    }

    /// Digest over every template id, version and body.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.templates.values() {
            h.update(format!("{}/{}\n", t.id, t.version).as_bytes());
            h.update(t.body.as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Renders with the bundled default templates.
pub fn render_prompt(id: TemplateId, slots: &Slots) -> Result<String, TemplateError> {
    TemplateSet::default().render(id, slots)
}

/// Appends a corrective note used for the single re-prompt after an
/// unusable reply.
pub fn with_correction(prompt: &str, problem: &str) -> String {
    format!(
        "{prompt}\n\nYour previous reply could not be used ({problem}). Reply again and follow the required output format exactly.\n"
    )
}
