//! `kgcot` command-line front end.

pub mod config;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use kgcot_core::embed_index::{build_index, Index};
use kgcot_core::graph::{load_graph_file, KnowledgeGraph};
use kgcot_core::pipeline::{
    compute_stats, read_audit, read_qa_pairs, read_stats, render_mapping, render_paths, render_trace, run_pipeline,
    write_outputs, CotRecord, Engine, RunOptions,
};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "kgcot", version, about = "Knowledge-graph grounded chain-of-thought data generation")]
pub struct Cli {
    /// Run configuration file (TOML). Relative paths inside it are resolved
    /// against its directory.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every graph node and write the similarity index.
    BuildIndex(BuildIndexArgs),
    /// Generate and filter chain-of-thought records for a QA file.
    Run(RunArgs),
    /// Pretty-print records from the audit output.
    Inspect(InspectArgs),
    /// Recompute statistics from the audit output and check them against the
    /// stored stats record.
    Stats(StatsArgs),
}

/// Settings that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Knowledge-graph CSV file.
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
    /// Embedding index file.
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Directory holding `<template>.txt` prompt overrides.
    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Response cache directory shared by the chat and embedding providers.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Maximum concurrent calls per provider.
    #[arg(long, value_name = "N")]
    pub in_flight: Option<usize>,
    /// Similarity threshold for accepting the nearest node (exclusive).
    #[arg(long, value_name = "X")]
    pub tau: Option<f64>,
    /// Nearest-node candidates retrieved per entity.
    #[arg(long, value_name = "N")]
    pub k_candidates: Option<usize>,
    /// Entities kept per side of a QA pair.
    #[arg(long, value_name = "N")]
    pub max_mentions: Option<usize>,
    /// Paths kept per node pair after pruning.
    #[arg(long, value_name = "N")]
    pub paths_k: Option<usize>,
    /// Shortest paths enumerated per node pair before pruning.
    #[arg(long, value_name = "N")]
    pub path_cap: Option<usize>,
    /// Worker threads processing QA pairs.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory for filtered, audit and stats outputs.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// QA pairs, one JSON object per line.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Continue from the checkpoint instead of starting over.
    #[arg(long)]
    pub resume: bool,
    /// Stop after processing this many new pairs, leaving a checkpoint.
    #[arg(long, value_name = "N")]
    pub max_pairs: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(subcommand)]
    pub target: InspectTarget,
    /// Audit JSONL file (defaults to the configured output directory).
    #[arg(long, value_name = "FILE", global = true)]
    pub audit: Option<PathBuf>,
    /// Directory holding the run outputs.
    #[arg(long, value_name = "DIR", global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum InspectTarget {
    /// Full trace of one record.
    Record {
        /// Record id as given in the input.
        id: String,
    },
    /// Path bundle of one record.
    Paths {
        /// Record id as given in the input.
        id: String,
    },
    /// Mentions and node mapping of one record.
    Mapping {
        /// Record id as given in the input.
        id: String,
    },
    /// The stored statistics table.
    Stats,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Audit JSONL file (defaults to the configured output directory).
    #[arg(long, value_name = "FILE")]
    pub audit: Option<PathBuf>,
    /// Stored stats record (defaults to the configured output directory).
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Directory holding the run outputs.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

pub fn command() -> clap::Command {
    Cli::command()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(v) = &o.graph {
        cfg.graph = Some(v.clone());
    }
    if let Some(v) = &o.index {
        cfg.index = Some(v.clone());
    }
    if let Some(v) = &o.templates {
        cfg.templates = Some(v.clone());
    }
    if let Some(v) = &o.cache_dir {
        cfg.chat.cache_dir = Some(v.clone());
        cfg.embed.cache_dir = Some(v.clone());
    }
    if let Some(v) = o.in_flight {
        cfg.chat.in_flight = v;
        cfg.embed.in_flight = v;
    }
    if let Some(v) = o.tau {
        cfg.mapping.tau = v;
    }
    if let Some(v) = o.k_candidates {
        cfg.mapping.k_candidates = v;
    }
    if let Some(v) = o.max_mentions {
        cfg.mapping.max_mentions = v;
    }
    if let Some(v) = o.paths_k {
        cfg.paths.k = v;
    }
    if let Some(v) = o.path_cap {
        cfg.paths.cap = v;
    }
    if let Some(v) = o.workers {
        cfg.pipeline.workers = v;
    }
    if let Some(v) = &o.checkpoint_dir {
        cfg.pipeline.checkpoint_dir = v.clone();
    }
    if let Some(v) = &o.output_dir {
        cfg.pipeline.output_dir = v.clone();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::BuildIndex(a) => cmd_build_index(config, &a),
        Command::Run(a) => cmd_run(config, &a),
        Command::Inspect(a) => cmd_inspect(config, &a),
        Command::Stats(a) => cmd_stats(config, &a),
    }
}

fn load_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let path = cfg.graph_path()?;
    load_graph_file(path, &cfg.columns).with_context(|| format!("loading graph {}", path.display()))
}

pub fn cmd_build_index(config: Option<&Path>, args: &BuildIndexArgs) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply(&mut cfg, &args.overrides);
    cfg.validate(false)?;
    let embed = cfg.embed_gateway()?;

    let graph = load_graph(&cfg)?;
    let index = build_index(&graph, &embed).context("building index")?;
    let path = cfg.index_path()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let mut w = std::io::BufWriter::new(file);
    index.write_to(&mut w).context("writing index")?;
    std::io::Write::flush(&mut w)?;
    drop(w);
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    println!("{} nodes, {} edges, {} vectors", graph.node_count(), graph.edge_count(), index.len());
    println!("index written to {}", path.display());
    Ok(())
}

fn load_index(cfg: &RunConfig, graph: &KnowledgeGraph, embedder_id: &str) -> Result<Index> {
    let path = cfg.index_path()?;
    let file = File::open(path).with_context(|| format!("opening index {} (run build-index first)", path.display()))?;
    let index =
        Index::read_from(BufReader::new(file), graph).with_context(|| format!("reading index {}", path.display()))?;
    ensure!(
        index.embedder_id() == embedder_id,
        "index {} was built with embedder `{}` but the configured embedder is `{embedder_id}`; rebuild it",
        path.display(),
        index.embedder_id()
    );
    Ok(index)
}

pub fn cmd_run(config: Option<&Path>, args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply(&mut cfg, &args.overrides);
    cfg.validate(true)?;
    ensure!(cfg.index_path()?.is_file(), "index {} does not exist; run build-index first", cfg.index_path()?.display());
    if let Some(0) = args.max_pairs {
        bail!("--max-pairs must be at least 1");
    }
    let input = File::open(&args.input).with_context(|| format!("opening input {}", args.input.display()))?;
    let pairs = read_qa_pairs(BufReader::new(input)).with_context(|| format!("reading {}", args.input.display()))?;
    let templates = cfg.template_set()?;
    let chat = cfg.chat_gateway()?;
    let embed = cfg.embed_gateway()?;
    let graph = load_graph(&cfg)?;
    let index = load_index(&cfg, &graph, &embed.embedder_id())?;

    let engine = Engine {
        graph: &graph,
        index: &index,
        chat: &chat,
        embed: &embed,
        templates: &templates,
        mapping: cfg.mapping,
        paths: cfg.paths,
    };
    let opts = RunOptions {
        workers: cfg.pipeline.workers,
        checkpoint_dir: Some(cfg.pipeline.checkpoint_dir.clone()),
        resume: args.resume,
        max_pairs: args.max_pairs,
    };
    let out = run_pipeline(&engine, &pairs, &opts)?;
    let m = chat.metrics();
    println!(
        "processed {} pairs ({} from checkpoint); chat: {} provider calls, {} cache hits",
        out.processed, out.resumed, m.provider_calls, m.cache_hits
    );
    if !out.complete {
        println!(
            "checkpointed {} of {} pairs in {}; rerun with --resume to continue",
            out.records.len(),
            pairs.len(),
            cfg.pipeline.checkpoint_dir.display()
        );
        return Ok(());
    }
    let paths = cfg.outputs();
    write_outputs(&out.records, &out.stats, &paths)?;
    print!("{}", out.stats.render_table());
    println!("stats: {}", out.stats.summary());
    println!("outputs in {}", cfg.pipeline.output_dir.display());
    Ok(())
}

fn output_dir(config: Option<&Path>, dir: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = load_config(config)?;
    if let Some(d) = dir {
        cfg.pipeline.output_dir = d.clone();
    }
    Ok(cfg)
}

fn find<'a>(records: &'a [CotRecord], id: &str) -> Result<&'a CotRecord> {
    records.iter().find(|r| r.qa.id == id).with_context(|| format!("no record with id `{id}`"))
}

pub fn cmd_inspect(config: Option<&Path>, args: &InspectArgs) -> Result<()> {
    let cfg = output_dir(config, &args.output_dir)?;
    let outputs = cfg.outputs();
    if let InspectTarget::Stats = args.target {
        let stored = read_stats(&outputs.stats)?;
        print!("{}", stored.stats.render_table());
        println!("stats: {}", stored.stats.summary());
        return Ok(());
    }
    let audit = args.audit.clone().unwrap_or(outputs.audit);
    let records = read_audit(&audit)?;
    match &args.target {
        InspectTarget::Record { id } => print!("{}", render_trace(find(&records, id)?)),
        InspectTarget::Paths { id } => print!("{}", render_paths(&find(&records, id)?.bundle)),
        InspectTarget::Mapping { id } => print!("{}", render_mapping(find(&records, id)?)),
        InspectTarget::Stats => unreachable!(),
    }
    Ok(())
}

pub fn cmd_stats(config: Option<&Path>, args: &StatsArgs) -> Result<()> {
    let cfg = output_dir(config, &args.output_dir)?;
    let outputs = cfg.outputs();
    let audit = args.audit.clone().unwrap_or(outputs.audit);
    let stats_path = args.stats.clone().unwrap_or(outputs.stats);
    let records = read_audit(&audit)?;
    let recomputed = compute_stats(&records);
    print!("{}", recomputed.render_table());
    println!("stats: {}", recomputed.summary());
    ensure!(recomputed.is_monotone(), "counts are not monotone");
    if !stats_path.exists() {
        println!("no stored stats record at {}; nothing to compare", stats_path.display());
        return Ok(());
    }
    let stored = read_stats(&stats_path)?;
    if stored.stats != recomputed {
        bail!(
            "stats mismatch: {} records say {}, {} says {}",
            audit.display(),
            recomputed.summary(),
            stats_path.display(),
            stored.stats.summary()
        );
    }
    println!("consistent with {}", stats_path.display());
    Ok(())
}
