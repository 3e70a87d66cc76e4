//! Run configuration file and provider wiring.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use kgcot_core::graph::ColumnMap;
use kgcot_core::llm::{
    ChatGateway, ChatProvider, EmbedGateway, EmbedProvider, HashEmbedder, OpenAiCompatible, ProviderConfig,
    ScriptedChat, TableEmbedder, TemplateSet,
};
use kgcot_core::mapping::MappingConfig;
use kgcot_core::paths::PathConfig;
use kgcot_core::pipeline::OutputPaths;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub workers: usize,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { workers: 4, checkpoint_dir: "checkpoint".into(), output_dir: "out".into() }
    }
}

/// Everything a run needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub columns: ColumnMap,
    pub index: Option<PathBuf>,
    /// Directory with `<template>.txt` overrides.
    pub templates: Option<PathBuf>,
    pub chat: ProviderConfig,
    pub embed: ProviderConfig,
    pub mapping: MappingConfig,
    pub paths: PathConfig,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: None,
            columns: ColumnMap::default(),
            index: None,
            templates: None,
            chat: ProviderConfig::default(),
            embed: ProviderConfig { provider: "hash".into(), ..ProviderConfig::default() },
            mapping: MappingConfig::default(),
            paths: PathConfig::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn is_scripted(kind: &str) -> bool {
    matches!(kind, "scripted" | "table")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Makes every relative path absolute with respect to `base`.
    fn rebase(&mut self, base: &Path) {
        for p in
            [&mut self.graph, &mut self.index, &mut self.templates, &mut self.chat.cache_dir, &mut self.embed.cache_dir]
                .into_iter()
                .flatten()
        {
            *p = resolve(base, p);
        }
        for p in [&mut self.pipeline.checkpoint_dir, &mut self.pipeline.output_dir] {
            *p = resolve(base, p);
        }
        for provider in [&mut self.chat, &mut self.embed] {
            if is_scripted(&provider.provider) {
                if let Some(e) = provider.endpoint.as_mut() {
                    *e = resolve(base, Path::new(e)).display().to_string();
                }
            }
        }
    }

    pub fn graph_path(&self) -> Result<&Path> {
        self.graph.as_deref().context("no graph file configured (set `graph` or pass --graph)")
    }

    pub fn index_path(&self) -> Result<&Path> {
        self.index.as_deref().context("no index file configured (set `index` or pass --index)")
    }

    pub fn outputs(&self) -> OutputPaths {
        let d = &self.pipeline.output_dir;
        OutputPaths {
            filtered: d.join("filtered.jsonl"),
            audit: d.join("audit.jsonl"),
            stats: d.join("stats.json"),
            table: d.join("stats.txt"),
        }
    }

    /// Checks bounds and that every referenced input exists. Touches nothing.
    pub fn validate(&self, need_chat: bool) -> Result<()> {
        let graph = self.graph_path()?;
        ensure!(graph.is_file(), "graph file {} does not exist", graph.display());
        self.index_path()?;
        if let Some(t) = &self.templates {
            ensure!(t.is_dir(), "template directory {} does not exist", t.display());
        }
        self.mapping.validate().map_err(anyhow::Error::msg)?;
        self.paths.validate().map_err(anyhow::Error::msg)?;
        ensure!(self.pipeline.workers >= 1, "pipeline.workers must be at least 1");
        check_provider("embed", &self.embed, &["hash", "table", "openai"])?;
        if need_chat {
            check_provider("chat", &self.chat, &["scripted", "openai"])?;
        }
        Ok(())
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.templates {
            Some(dir) => TemplateSet::with_overrides(dir).context("loading template overrides"),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn chat_gateway(&self) -> Result<ChatGateway> {
        let c = &self.chat;
        let provider: Arc<dyn ChatProvider> = match c.provider.as_str() {
            "scripted" => {
                let path = c.endpoint.as_deref().unwrap_or_default();
                Arc::new(ScriptedChat::from_file(Path::new(path)).map_err(anyhow::Error::msg)?)
            }
            "openai" => Arc::new(openai(c)?),
            other => bail!("unknown chat provider `{other}`"),
        };
        ChatGateway::new(provider, c).context("chat provider")
    }

    pub fn embed_gateway(&self) -> Result<EmbedGateway> {
        let c = &self.embed;
        let provider: Arc<dyn EmbedProvider> = match c.provider.as_str() {
            "hash" => Arc::new(HashEmbedder::new(c.dimension)),
            "table" => {
                let path = c.endpoint.as_deref().unwrap_or_default();
                Arc::new(TableEmbedder::from_file(Path::new(path)).map_err(anyhow::Error::msg)?)
            }
            "openai" => Arc::new(openai(c)?),
            other => bail!("unknown embedding provider `{other}`"),
        };
        EmbedGateway::new(provider, c).context("embedding provider")
    }
}

fn check_provider(role: &str, c: &ProviderConfig, kinds: &[&str]) -> Result<()> {
    ensure!(
        kinds.contains(&c.provider.as_str()),
        "{role}.provider `{}` is not one of {}",
        c.provider,
        kinds.join(", ")
    );
    c.validate().map_err(|e| anyhow::anyhow!("{role}: {e}"))?;
    match c.provider.as_str() {
        "scripted" | "table" => {
            let file = c.endpoint.as_deref().with_context(|| format!("{role}.endpoint must name the script file"))?;
            ensure!(Path::new(file).is_file(), "{role} script {file} does not exist");
        }
        "openai" => {
            ensure!(c.endpoint.is_some(), "{role}.endpoint must be the API base URL");
            ensure!(!c.model.is_empty(), "{role}.model must be set");
            let var = c.credential_env.as_deref().with_context(|| format!("{role}.credential_env must be set"))?;
            ensure!(std::env::var_os(var).is_some(), "{role}: environment variable {var} is not set");
        }
        _ => {}
    }
    Ok(())
}

fn openai(c: &ProviderConfig) -> Result<OpenAiCompatible> {
    OpenAiCompatible::from_env(
        c.endpoint.as_deref().unwrap_or_default(),
        &c.model,
        c.credential_env.as_deref().unwrap_or_default(),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))
}
