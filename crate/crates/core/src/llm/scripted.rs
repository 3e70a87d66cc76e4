//! Deterministic offline providers.
//!
//! # Rule file format (version 1)
//!
//! A TOML document:
//!
//! ```toml
//! version = 1
//! fallback = "reply used when no rule matches"   # optional
//!
//! [[rule]]
//! template = "prune"          # optional: extraction | select | prune | generate | eval
//! contains = ["PRUNE"]        # every string must occur in the prompt
//! absent = ["do not match"]   # none of these may occur (optional)
//! reply = "1,3"
//! ```
//!
//! Rules are tried in file order; the first match wins. A prompt that matches
//! no rule and has no fallback is an invalid-response error.
//!
//! # Embedding table format (version 1)
//!
//! ```toml
//! version = 1
//! dimension = 8        # dimension of the hash fallback for unlisted texts
//! [vectors]
//! "ataxia" = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
//! ```
//!
//! Keys are matched on the folded text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{ChatProvider, ChatRequest, EmbedProvider, ProviderError, TemplateId};
use crate::graph::fold_name;

const RULES_VERSION: u32 = 1;
const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(default)]
    pub template: Option<TemplateId>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub absent: Vec<String>,
    pub reply: String,
}

impl Rule {
    pub fn contains(template: Option<TemplateId>, needles: &[&str], reply: &str) -> Self {
        Self {
            template,
            contains: needles.iter().map(|s| s.to_string()).collect(),
            absent: Vec::new(),
            reply: reply.to_string(),
        }
    }

    pub fn absent(mut self, needles: &[&str]) -> Self {
        self.absent = needles.iter().map(|s| s.to_string()).collect();
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        self.template.is_none_or(|t| t == req.template)
            && self.contains.iter().all(|n| req.prompt.contains(n.as_str()))
            && !self.absent.iter().any(|n| req.prompt.contains(n.as_str()))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    version: u32,
    #[serde(default)]
    fallback: Option<String>,
    #[serde(default, rename = "rule")]
    rules: Vec<Rule>,
}

/// Rule-based stand-in for a chat model.
///
/// Also counts calls, records the peak number of concurrent calls and keeps
/// a log of every prompt it was asked, so tests can observe traffic.
pub struct ScriptedChat {
    rules: Vec<Rule>,
    fallback: Option<String>,
    latency: Duration,
    calls: AtomicU64,
    active: AtomicUsize,
    peak: AtomicUsize,
    log: Mutex<Vec<(TemplateId, String)>>,
    id: String,
}

impl ScriptedChat {
    pub fn new(rules: Vec<Rule>) -> Self {
        let id = {
            let mut h = Sha256::new();
            for r in &rules {
                h.update(format!("{r:?}").as_bytes());
            }
            format!("scripted-{}", &hex::encode(h.finalize())[..12])
        };
        Self {
            rules,
            fallback: None,
            latency: Duration::ZERO,
            calls: AtomicU64::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
            id,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: RuleFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if file.version != RULES_VERSION {
            return Err(format!("unsupported rule file version {}", file.version));
        }
        let mut chat = Self::new(file.rules);
        chat.fallback = file.fallback;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        chat.id = format!("scripted-{}", &hex::encode(h.finalize())[..12]);
        Ok(chat)
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn with_fallback(mut self, reply: impl Into<String>) -> Self {
        self.fallback = Some(reply.into());
        self
    }

    /// Sleeps this long inside every call, to make concurrency observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<(TemplateId, String)> {
        self.log.lock().unwrap().clone()
    }

    pub fn reply_for(&self, req: &ChatRequest) -> Option<&str> {
        self.rules.iter().find(|r| r.matches(req)).map(|r| r.reply.as_str()).or(self.fallback.as_deref())
    }
}

impl ChatProvider for ScriptedChat {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.log.lock().unwrap().push((req.template, req.prompt.clone()));
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        self.active.fetch_sub(1, Ordering::SeqCst);
        self.reply_for(req)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Invalid(format!("no scripted rule matches this {} prompt", req.template)))
    }
}

/// Deterministic pseudo-embedding derived from SHA-256 of the folded text.
///
/// Identical folded texts get identical vectors, so self-similarity is 1.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    calls: std::sync::Arc<AtomicU64>,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1), calls: Default::default() }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        hash_vector(&fold_name(text), self.dim)
    }
}

fn hash_vector(text: &str, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dim);
    let mut block = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(4) {
            if out.len() == dim {
                break;
            }
            let x = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            out.push((x as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
        }
        block += 1;
    }
    out
}

impl EmbedProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    version: u32,
    dimension: usize,
    #[serde(default)]
    vectors: BTreeMap<String, Vec<f32>>,
}

/// Explicit text → vector table with a hash fallback.
///
/// The table is not validated for consistent dimensions, which lets tests
/// script deliberately broken embedders.
pub struct TableEmbedder {
    table: HashMap<String, Vec<f32>>,
    fallback: HashEmbedder,
    id: String,
    calls: AtomicU64,
}

impl TableEmbedder {
    pub fn new(dimension: usize, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        let sorted: BTreeMap<String, Vec<f32>> = entries.into_iter().map(|(k, v)| (fold_name(&k), v)).collect();
        let mut h = Sha256::new();
        h.update((dimension as u64).to_le_bytes());
        for (k, v) in &sorted {
            h.update(k.as_bytes());
            h.update([0u8]);
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        Self {
            id: format!("table-{}", &hex::encode(h.finalize())[..12]),
            table: sorted.into_iter().collect(),
            fallback: HashEmbedder::new(dimension),
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: TableFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if file.version != TABLE_VERSION {
            return Err(format!("unsupported embedding table version {}", file.version));
        }
        Ok(Self::new(file.dimension, file.vectors))
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbedProvider for TableEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| self.table.get(&fold_name(t)).cloned().unwrap_or_else(|| self.fallback.vector(t)))
            .collect())
    }
}
