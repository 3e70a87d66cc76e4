//! Per-pair orchestration: extraction, mapping, paths, generation and the
//! answer-recovery filter.

pub mod answer;
pub mod qa;
pub mod record;
pub mod run;
pub mod stats;
pub mod trace;

pub use answer::{match_answer, MATCH_RULES_VERSION};
pub use qa::{read_qa_pairs, AnswerOption, GoldAnswer, QaError, QaPair};
pub use record::{CotRecord, ExclusionReason, FilteredRecord, Status, Verdict};
pub use run::{
    eval_prompt, generate_cot, read_audit, read_stats, run_pipeline, verify_cot, write_outputs, Engine, OutputPaths,
    PipelineError, RunOptions, RunOutcome, StatsRecord,
};
pub use stats::{compute_stats, Counts, PipelineStats, SourceCounts};
pub use trace::{render_mapping, render_paths, render_trace};
