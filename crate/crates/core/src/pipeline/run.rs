//! Per-pair processing, worker pool and checkpointing.
//!
//! A checkpoint directory holds `manifest.json` (format version and a
//! fingerprint of everything that influences the output) and
//! `journal.jsonl`, one finished record per line, appended as pairs
//! complete. Resuming skips every journaled pair; a torn final line left by
//! a crash is discarded.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::answer::{final_segment, match_answer, parse_prediction, MATCH_RULES_VERSION};
use super::qa::QaPair;
use super::record::{CotRecord, ExclusionReason, FilteredRecord, Status, Verdict};
use super::stats::{compute_stats, PipelineStats};
use crate::embed_index::{Index, IndexError};
use crate::graph::{GraphError, KnowledgeGraph};
use crate::llm::{
    with_correction, ChatGateway, ChatRequest, EmbedGateway, GatewayError, Slots, TemplateError, TemplateId,
    TemplateSet,
};
use crate::mapping::{extract_entities, MapError, Mapper, MappingConfig, Origin};
use crate::paths::{collect_paths, PathBundle, PathConfig, PathError};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(IndexError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot generate from an empty path bundle")]
    EmptyBundle,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(
        "checkpoint belongs to a different run (fingerprint {found}, expected {expected}); remove it or drop --resume"
    )]
    FingerprintMismatch { expected: String, found: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Errors that end the whole run rather than a single pair.
fn is_fatal(e: &GatewayError) -> bool {
    !matches!(e, GatewayError::Exhausted { .. } | GatewayError::Provider(_))
}

enum PairFailure {
    Exclude(ExclusionReason, String),
    Fatal(PipelineError),
}

impl From<PipelineError> for PairFailure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(g) if !is_fatal(&g) => {
                PairFailure::Exclude(ExclusionReason::LlmFailure, g.to_string())
            }
            other => PairFailure::Fatal(other),
        }
    }
}

impl From<MapError> for PairFailure {
    fn from(e: MapError) -> Self {
        match e {
            MapError::Gateway(g) => PipelineError::Gateway(g).into(),
            MapError::Index(i) => PairFailure::Fatal(PipelineError::Index(i)),
            MapError::Template(t) => PairFailure::Fatal(t.into()),
            MapError::Unparseable { reply } => {
                PairFailure::Exclude(ExclusionReason::LlmFailure, format!("unparseable extraction reply: {reply:?}"))
            }
            MapError::EmptyQuestion => PairFailure::Exclude(ExclusionReason::NoEntities, "empty question".into()),
        }
    }
}

impl From<PathError> for PairFailure {
    fn from(e: PathError) -> Self {
        match e {
            PathError::Gateway(g) => PipelineError::Gateway(g).into(),
            PathError::Graph(g) => PairFailure::Fatal(g.into()),
            PathError::Template(t) => PairFailure::Fatal(t.into()),
            other => PairFailure::Fatal(PipelineError::Config(other.to_string())),
        }
    }
}

/// Chain of thought for `qa` guided by `bundle`. `None` when the LLM returns
/// only whitespace twice.
pub fn generate_cot(
    qa: &QaPair,
    bundle: &PathBundle,
    chat: &ChatGateway,
    templates: &TemplateSet,
) -> Result<Option<String>, PipelineError> {
    if bundle.is_empty() {
        return Err(PipelineError::EmptyBundle);
    }
    let paths = bundle.paths.iter().map(|p| format!("- {}", p.render())).collect::<Vec<_>>().join("\n");
    let prompt = templates.render(
        TemplateId::Generate,
        &Slots::new().with("question", qa.question_block()).with("answer", qa.answer_text()).with("paths", paths),
    )?;
    let reply = chat.chat(&ChatRequest::new(TemplateId::Generate, prompt.clone()))?;
    if !reply.trim().is_empty() {
        return Ok(Some(reply.trim().to_string()));
    }
    let reply = chat.chat(&ChatRequest::new(TemplateId::Generate, with_correction(&prompt, "the reply was empty")))?;
    Ok((!reply.trim().is_empty()).then(|| reply.trim().to_string()))
}

/// Eval prompt for `qa`: question block and reasoning, nothing from the gold
/// answer.
pub fn eval_prompt(qa: &QaPair, cot: &str, templates: &TemplateSet) -> Result<String, TemplateError> {
    templates.render(TemplateId::Eval, &Slots::new().with("question", qa.question_block()).with("cot", cot))
}

/// Asks the LLM to answer from `cot` alone and compares with the gold answer.
pub fn verify_cot(
    qa: &QaPair,
    cot: &str,
    chat: &ChatGateway,
    templates: &TemplateSet,
) -> Result<Verdict, PipelineError> {
    let prompt = eval_prompt(qa, cot, templates)?;
    let mut reply = chat.chat(&ChatRequest::new(TemplateId::Eval, prompt.clone()))?;
    let mut parsed = parse_prediction(&reply, qa);
    if parsed.is_none() {
        let retry = with_correction(&prompt, "no single answer could be identified");
        reply = chat.chat(&ChatRequest::new(TemplateId::Eval, retry))?;
        parsed = parse_prediction(&reply, qa);
    }
    Ok(match parsed {
        Some((label, _)) => Verdict {
            predicted: final_segment(&reply).to_string(),
            predicted_label: label,
            matched: match_answer(&reply, qa),
            parse_failure: false,
        },
        None => Verdict {
            predicted: final_segment(&reply).to_string(),
            predicted_label: None,
            matched: false,
            parse_failure: true,
        },
    })
}

/// Shared, read-only inputs of a run.
pub struct Engine<'a> {
    pub graph: &'a KnowledgeGraph,
    pub index: &'a Index,
    pub chat: &'a ChatGateway,
    pub embed: &'a EmbedGateway,
    pub templates: &'a TemplateSet,
    pub mapping: MappingConfig,
    pub paths: PathConfig,
}

impl Engine<'_> {
    /// Runs every stage for one pair. `Err` only for run-ending failures.
    pub fn process(&self, qa: &QaPair) -> Result<CotRecord, PipelineError> {
        let mut rec = CotRecord::new(qa.clone());
        match self.stages(qa, &mut rec) {
            Ok(()) => Ok(rec),
            Err(PairFailure::Exclude(reason, detail)) => Ok(rec.exclude(reason, detail)),
            Err(PairFailure::Fatal(e)) => Err(e),
        }
    }

    fn stages(&self, qa: &QaPair, rec: &mut CotRecord) -> Result<(), PairFailure> {
        let question = qa.question_block();
        let answer = qa.answer_text();
        rec.mentions = extract_entities(&question, &answer, self.mapping.max_mentions, self.chat, self.templates)?;
        let count = |o| rec.mentions.iter().filter(|m| m.origin == o).count();
        let (nq, na) = (count(Origin::Question), count(Origin::Answer));
        if nq == 0 || na == 0 {
            return Err(PairFailure::Exclude(
                ExclusionReason::NoEntities,
                format!("{nq} question and {na} answer entities"),
            ));
        }

        let mapper = Mapper {
            graph: self.graph,
            index: self.index,
            chat: self.chat,
            embed: self.embed,
            templates: self.templates,
            cfg: self.mapping,
        };
        rec.mapping = mapper.map_all(&rec.mentions, &question, &answer)?;
        if rec.mapping.is_incomplete() {
            return Err(PairFailure::Exclude(
                ExclusionReason::NoMapping,
                format!(
                    "{} question and {} answer nodes mapped",
                    rec.mapping.question_nodes().len(),
                    rec.mapping.answer_nodes().len()
                ),
            ));
        }

        rec.bundle = collect_paths(
            &rec.mapping.question_nodes(),
            &rec.mapping.answer_nodes(),
            self.graph,
            &question,
            &self.paths,
            self.chat,
            self.templates,
        )?;
        if rec.bundle.is_empty() {
            return Err(PairFailure::Exclude(
                ExclusionReason::NoPaths,
                format!("no path across {} node pairs", rec.bundle.pairs.len()),
            ));
        }

        let cot = generate_cot(qa, &rec.bundle, self.chat, self.templates)?
            .ok_or_else(|| PairFailure::Exclude(ExclusionReason::LlmFailure, "empty generation".into()))?;
        rec.cot = Some(cot);
        rec.status = Status::Generated;

        let verdict = verify_cot(qa, rec.cot.as_deref().unwrap_or_default(), self.chat, self.templates)?;
        rec.status = if verdict.matched { Status::Retained } else { Status::Rejected };
        rec.verdict = Some(verdict);
        Ok(())
    }

    /// Digest of the graph, providers, templates, settings and input.
    pub fn fingerprint(&self, pairs: &[QaPair]) -> String {
        let mut h = Sha256::new();
        let mut field = |b: &[u8]| {
            h.update((b.len() as u64).to_le_bytes());
            h.update(b);
        };
        field(self.graph.fingerprint().as_bytes());
        for e in self.graph.edges() {
            field(format!("{}\t{}\t{}\t{}", e.src, e.dst, e.relation, e.display_relation).as_bytes());
        }
        field(self.index.embedder_id().as_bytes());
        field(self.embed.embedder_id().as_bytes());
        field(self.chat.provider_id().as_bytes());
        field(self.templates.fingerprint().as_bytes());
        field(serde_json::to_string(&self.mapping).unwrap_or_default().as_bytes());
        field(serde_json::to_string(&self.paths).unwrap_or_default().as_bytes());
        field(&MATCH_RULES_VERSION.to_le_bytes());
        for p in pairs {
            field(serde_json::to_string(p).unwrap_or_default().as_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many newly processed pairs.
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Finished records in input order.
    pub records: Vec<CotRecord>,
    pub stats: PipelineStats,
    /// Every input pair has a record.
    pub complete: bool,
    /// Pairs taken from the checkpoint.
    pub resumed: usize,
    /// Pairs processed in this invocation.
    pub processed: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    fingerprint: String,
}

struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    fn append(&self, rec: &CotRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(rec)
            .map_err(|e| PipelineError::Checkpoint { path: self.path.clone(), message: e.to_string() })?;
        line.push('\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }
}

fn open_checkpoint(dir: &Path, fingerprint: &str, resume: bool) -> Result<(Journal, Vec<CotRecord>), PipelineError> {
    let manifest_path = dir.join("manifest.json");
    let journal_path = dir.join("journal.jsonl");
    let ck_err = |path: &Path, message: String| PipelineError::Checkpoint { path: path.to_path_buf(), message };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut done = Vec::new();
    let existing = resume && manifest_path.exists();
    if existing {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| ck_err(&manifest_path, e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(ck_err(&manifest_path, format!("unsupported version {}", m.version)));
        }
        if m.fingerprint != fingerprint {
            return Err(PipelineError::FingerprintMismatch { expected: fingerprint.into(), found: m.fingerprint });
        }
        let mut bytes = Vec::new();
        if journal_path.exists() {
            File::open(&journal_path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(&journal_path))?;
        }
        let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete_len < bytes.len() {
            log::warn!("discarding torn trailing line in {}", journal_path.display());
            let f = OpenOptions::new().write(true).open(&journal_path).map_err(io_err(&journal_path))?;
            f.set_len(complete_len as u64).map_err(io_err(&journal_path))?;
        }
        for (i, line) in bytes[..complete_len].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rec: CotRecord =
                serde_json::from_slice(line).map_err(|e| ck_err(&journal_path, format!("line {}: {e}", i + 1)))?;
            done.push(rec);
        }
    } else {
        if resume {
            log::warn!("no checkpoint in {}; starting from scratch", dir.display());
        }
        let manifest = Manifest { version: CHECKPOINT_VERSION, fingerprint: fingerprint.to_string() };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
        File::create(&journal_path).map_err(io_err(&journal_path))?;
    }
    let file = OpenOptions::new().append(true).open(&journal_path).map_err(io_err(&journal_path))?;
    Ok((Journal { path: journal_path, file: Mutex::new(file) }, done))
}

/// Processes `pairs` with a pool of workers, journaling each finished record.
pub fn run_pipeline(engine: &Engine<'_>, pairs: &[QaPair], opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    engine.mapping.validate().map_err(PipelineError::Config)?;
    engine.paths.validate().map_err(PipelineError::Config)?;
    if opts.workers == 0 {
        return Err(PipelineError::Config("workers must be at least 1".into()));
    }

    let mut slots: Vec<Option<CotRecord>> = vec![None; pairs.len()];
    let journal = match &opts.checkpoint_dir {
        Some(dir) => {
            let (journal, done) = open_checkpoint(dir, &engine.fingerprint(pairs), opts.resume)?;
            for rec in done {
                match pairs.iter().position(|p| p.id == rec.qa.id) {
                    Some(i) if slots[i].is_none() => slots[i] = Some(rec),
                    Some(_) => {}
                    None => {
                        return Err(PipelineError::Checkpoint {
                            path: journal.path.clone(),
                            message: format!("record `{}` is not in the input", rec.qa.id),
                        })
                    }
                }
            }
            Some(journal)
        }
        None => None,
    };
    let resumed = slots.iter().filter(|s| s.is_some()).count();

    let mut pending: Vec<usize> = (0..pairs.len()).filter(|&i| slots[i].is_none()).collect();
    if let Some(n) = opts.max_pairs {
        pending.truncate(n);
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<PipelineError>> = Mutex::new(None);
    let results = Mutex::new(slots);
    let fail = |e: PipelineError| {
        abort.store(true, Ordering::SeqCst);
        failure.lock().unwrap().get_or_insert(e);
    };
    std::thread::scope(|s| {
        for _ in 0..opts.workers.min(pending.len()) {
            s.spawn(|| {
                while !abort.load(Ordering::SeqCst) {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = pending.get(n) else { break };
                    let rec = match engine.process(&pairs[i]) {
                        Ok(r) => r,
                        Err(e) => return fail(e),
                    };
                    if let Some(j) = &journal {
                        if let Err(e) = j.append(&rec) {
                            return fail(e);
                        }
                    }
                    results.lock().unwrap()[i] = Some(rec);
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let slots = results.into_inner().unwrap();
    let complete = slots.iter().all(Option::is_some);
    let records: Vec<CotRecord> = slots.into_iter().flatten().collect();
    let stats = compute_stats(&records);
    Ok(RunOutcome { processed: records.len() - resumed, records, stats, complete, resumed })
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub filtered: PathBuf,
    pub audit: PathBuf,
    /// Machine-readable stats record.
    pub stats: PathBuf,
    /// Aligned text table.
    pub table: PathBuf,
}

/// Stored alongside the audit output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub version: u32,
    pub stats: PipelineStats,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_outputs(records: &[CotRecord], stats: &PipelineStats, out: &OutputPaths) -> Result<(), PipelineError> {
    write_atomic(&out.filtered, jsonl(records.iter().filter_map(FilteredRecord::from_record)).as_bytes())?;
    write_atomic(&out.audit, jsonl(records).as_bytes())?;
    let rec = StatsRecord { version: 1, stats: stats.clone() };
    let mut text = serde_json::to_string_pretty(&rec).expect("stats serialize");
    text.push('\n');
    write_atomic(&out.stats, text.as_bytes())?;
    write_atomic(&out.table, stats.render_table().as_bytes())
}

/// Reads an audit JSONL file.
pub fn read_audit(path: &Path) -> Result<Vec<CotRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn read_stats(path: &Path) -> Result<StatsRecord, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format { path: path.to_path_buf(), message: e.to_string() })
}
