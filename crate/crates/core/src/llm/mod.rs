//! Provider abstraction for chat completions and embeddings.
//!
//! Every call in the pipeline goes through a [`ChatGateway`] or
//! [`EmbedGateway`], which add retries with exponential backoff, an in-flight
//! cap, a requests-per-minute limit and a content-addressed response cache on
//! top of a bare provider.

mod gateway;
mod http;
mod limits;
mod scripted;
mod templates;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gateway::{ChatGateway, EmbedGateway, GatewayMetrics};
pub use http::OpenAiCompatible;
pub use limits::{InFlight, RateLimiter};
pub use scripted::{HashEmbedder, Rule, ScriptedChat, TableEmbedder};
pub use templates::{render_prompt, with_correction, Slots, Template, TemplateError, TemplateSet};

/// The five prompts used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Extraction,
    Select,
    Prune,
    Generate,
    Eval,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] =
        [TemplateId::Extraction, TemplateId::Select, TemplateId::Prune, TemplateId::Generate, TemplateId::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Extraction => "extraction",
            TemplateId::Select => "select",
            TemplateId::Prune => "prune",
            TemplateId::Generate => "generate",
            TemplateId::Eval => "eval",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown template id `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub prompt: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(template: TemplateId, prompt: impl Into<String>) -> Self {
        Self { template, prompt: prompt.into(), temperature: 0.0, max_tokens: 2048 }
    }
}

/// Connection and throttling settings for one provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Provider kind: `scripted`, `hash`, `table` or `openai`.
    pub provider: String,
    pub model: String,
    /// Base URL for remote providers, or a rule/table file for scripted ones.
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_env: Option<String>,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub rate_limit_rpm: u32,
    pub in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    /// Texts per embedding request (embedding providers only).
    pub batch_size: usize,
    /// Dimension for hash-based embedders.
    pub dimension: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider: "scripted".into(),
            model: String::new(),
            endpoint: None,
            credential_env: None,
            max_retries: 3,
            backoff_base_ms: 500,
            rate_limit_rpm: 600,
            in_flight: 8,
            cache_dir: None,
            batch_size: 64,
            dimension: 16,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rate_limit_rpm < 1 {
            return Err("rate_limit_rpm must be at least 1".into());
        }
        if self.in_flight < 1 {
            return Err("in_flight must be at least 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        if self.dimension < 1 {
            return Err("dimension must be at least 1".into());
        }
        Ok(())
    }
}

/// Failure reported by a bare provider.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    /// Network hiccup, 5xx, timeout. Retried.
    #[error("transient: {0}")]
    Transient(String),
    /// 429 from the remote side. Retried, waiting at least `retry_after_ms`.
    #[error("rate limited (retry after {retry_after_ms} ms)")]
    RateLimited { retry_after_ms: u64 },
    /// Bad or missing credentials. Never retried.
    #[error("authentication failed: {0}")]
    Auth(String),
    /// The provider answered but the answer is unusable. Never retried.
    #[error("invalid response: {0}")]
    Invalid(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transient(_) | ProviderError::RateLimited { .. })
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {}", trace.join("; "))]
    Exhausted { attempts: u32, trace: Vec<String> },
    #[error("credential error: {0}")]
    Credential(String),
    #[error("provider error: {0}")]
    Provider(ProviderError),
    #[error("empty embedding batch")]
    EmptyBatch,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid provider config: {0}")]
    Config(String),
}

pub trait ChatProvider: Send + Sync {
    /// Stable identity used in cache keys.
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait EmbedProvider: Send + Sync {
    /// Stable identity used in cache keys and index headers.
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}
