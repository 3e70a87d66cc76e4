use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgcot_core::embed_index::{build_index, Index};
use kgcot_core::graph::{load_graph_file, ColumnMap, KnowledgeGraph};
use kgcot_core::llm::{
    ChatGateway, EmbedGateway, ProviderConfig, ScriptedChat, TableEmbedder, TemplateId, TemplateSet,
};
use kgcot_core::mapping::{MappingConfig, Stage};
use kgcot_core::paths::{all_shortest_paths, PathConfig};
use kgcot_core::pipeline::{
    eval_prompt, read_qa_pairs, render_trace, run_pipeline, write_outputs, Engine, ExclusionReason, OutputPaths,
    QaPair, RunOptions, Status,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

struct World {
    graph: KnowledgeGraph,
    index: Index,
    chat: Arc<ScriptedChat>,
    chat_gw: ChatGateway,
    embed_gw: EmbedGateway,
    templates: TemplateSet,
    pairs: Vec<QaPair>,
}

impl World {
    fn new() -> Self {
        let dir = fixtures();
        let graph = load_graph_file(&dir.join("graph.csv"), &ColumnMap::default()).unwrap();
        let cfg = ProviderConfig { max_retries: 0, dimension: 8, ..ProviderConfig::default() };
        let embed = TableEmbedder::from_file(&dir.join("embeddings.toml")).unwrap();
        let embed_gw = EmbedGateway::new(Arc::new(embed), &cfg).unwrap();
        let index = build_index(&graph, &embed_gw).unwrap();
        let chat = Arc::new(ScriptedChat::from_file(&dir.join("rules.toml")).unwrap());
        let chat_gw = ChatGateway::new(chat.clone(), &cfg).unwrap();
        let pairs = read_qa_pairs(std::io::BufReader::new(std::fs::File::open(dir.join("qa.jsonl")).unwrap())).unwrap();
        Self { graph, index, chat, chat_gw, embed_gw, templates: TemplateSet::default(), pairs }
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            graph: &self.graph,
            index: &self.index,
            chat: &self.chat_gw,
            embed: &self.embed_gw,
            templates: &self.templates,
            mapping: MappingConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

fn opts(workers: usize, dir: Option<&Path>) -> RunOptions {
    RunOptions { workers, checkpoint_dir: dir.map(Path::to_path_buf), resume: false, max_pairs: None }
}

#[test]
fn fixture_counts_and_statuses() {
    let w = World::new();
    assert_eq!((w.graph.node_count(), w.graph.edge_count(), w.index.len()), (6, 5, 6));
    let out = run_pipeline(&w.engine(), &w.pairs, &opts(4, None)).unwrap();
    assert!(out.complete);
    assert_eq!(out.stats.summary(), "12 / 10 / 8");
    assert!(out.stats.is_monotone());
    let retained: Vec<&str> =
        out.records.iter().filter(|r| r.status == Status::Retained).map(|r| r.qa.id.as_str()).collect();
    assert_eq!(retained, ["q01", "q02", "q04", "q05", "q06", "q10", "q11", "q12"]);
    let rejected: Vec<&str> =
        out.records.iter().filter(|r| r.status == Status::Rejected).map(|r| r.qa.id.as_str()).collect();
    assert_eq!(rejected, ["q03", "q08"]);
    for id in ["q07", "q09"] {
        let r = out.records.iter().find(|r| r.qa.id == id).unwrap();
        assert_eq!((r.status, r.reason), (Status::Excluded, Some(ExclusionReason::NoEntities)));
    }
    assert!(out.records.iter().all(|r| r.is_consistent()));
}

#[test]
fn fig2_mapping_and_trace() {
    let w = World::new();
    let out = run_pipeline(&w.engine(), &w.pairs[..1], &opts(1, None)).unwrap();
    let r = &out.records[0];
    let stages: Vec<(&str, Stage)> = r.mapping.mapped.iter().map(|m| (m.node_name.as_str(), m.stage)).collect();
    assert_eq!(
        stages,
        [
            ("difficulty walking", Stage::Exact),
            ("broad-based gait", Stage::Exact),
            ("abnormality of the optic disc", Stage::Similarity),
            ("medulloblastoma", Stage::Exact),
        ]
    );
    let score = r.mapping.mapped[2].score.unwrap();
    assert!((score - 0.87).abs() < 1e-6 && score > 0.85);
    assert!(r.cot.as_deref().unwrap().contains("ataxia"));
    let trace = render_trace(r);
    assert!(trace.contains("difficulty walking —phenotype of→ ataxia —phenotype of→ medulloblastoma"), "{trace}");

    let direct = all_shortest_paths(&w.graph, 1, 4, 64).unwrap();
    assert_eq!(direct.paths.len(), 1);
    assert_eq!(direct.paths[0].names[1], "ataxia");
}

#[test]
fn llm_selection_in_fixture() {
    let w = World::new();
    let out = run_pipeline(&w.engine(), &w.pairs[1..2], &opts(1, None)).unwrap();
    let m = &out.records[0].mapping.mapped[0];
    assert_eq!((m.node_name.as_str(), m.stage), ("broad-based gait", Stage::LlmSelected));
}

#[test]
fn eval_prompts_ignore_gold() {
    let w = World::new();
    run_pipeline(&w.engine(), &w.pairs, &opts(2, None)).unwrap();
    let evals: Vec<String> =
        w.chat.prompts().into_iter().filter(|(t, _)| *t == TemplateId::Eval).map(|(_, p)| p).collect();
    assert_eq!(evals.len(), 10);
    for qa in &w.pairs {
        let mut altered = qa.clone();
        altered.answer.text = Some("ZZ-gold-sentinel".into());
        let a = eval_prompt(qa, "some reasoning", &w.templates).unwrap();
        let b = eval_prompt(&altered, "some reasoning", &w.templates).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("ZZ-gold-sentinel"));
    }
}

#[test]
fn resume_after_interrupt_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let full = {
        let w = World::new();
        run_pipeline(&w.engine(), &w.pairs, &opts(3, None)).unwrap()
    };

    let ck = tmp.path().join("ck");
    let w = World::new();
    let first = run_pipeline(&w.engine(), &w.pairs, &RunOptions { max_pairs: Some(5), ..opts(3, Some(&ck)) }).unwrap();
    assert!(!first.complete);
    assert_eq!(first.processed, 5);
    // simulate a crash mid-append
    let journal = ck.join("journal.jsonl");
    let mut bytes = std::fs::read(&journal).unwrap();
    bytes.extend_from_slice(b"{\"id\":\"q1");
    std::fs::write(&journal, bytes).unwrap();

    let w2 = World::new();
    let second = run_pipeline(&w2.engine(), &w2.pairs, &RunOptions { resume: true, ..opts(3, Some(&ck)) }).unwrap();
    assert!(second.complete);
    assert_eq!((second.resumed, second.processed), (5, 7));
    let resumed_ids: Vec<&str> = first.records.iter().map(|r| r.qa.id.as_str()).collect();
    let prompts = w2.chat.prompts();
    for id in resumed_ids {
        let q = &w2.pairs.iter().find(|p| p.id == id).unwrap().question;
        assert!(prompts.iter().all(|(_, p)| !p.contains(q.as_str())), "provider re-called for {id}");
    }

    let write = |name: &str, out: &kgcot_core::pipeline::RunOutcome| {
        let d = tmp.path().join(name);
        let paths = OutputPaths {
            filtered: d.join("filtered.jsonl"),
            audit: d.join("audit.jsonl"),
            stats: d.join("stats.json"),
            table: d.join("stats.txt"),
        };
        write_outputs(&out.records, &out.stats, &paths).unwrap();
        paths
    };
    let a = write("a", &full);
    let b = write("b", &second);
    for (x, y) in [(&a.filtered, &b.filtered), (&a.audit, &b.audit), (&a.stats, &b.stats), (&a.table, &b.table)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn resume_rejects_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let w = World::new();
    run_pipeline(&w.engine(), &w.pairs, &RunOptions { max_pairs: Some(2), ..opts(1, Some(tmp.path())) }).unwrap();
    let mut e = w.engine();
    e.paths.k = 2;
    let err = run_pipeline(&e, &w.pairs, &RunOptions { resume: true, ..opts(1, Some(tmp.path())) }).unwrap_err();
    assert!(err.to_string().contains("fingerprint"), "{err}");
}
