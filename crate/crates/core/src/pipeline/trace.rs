//! Human-readable renderings of audit records.

use std::fmt::Write;

use super::record::CotRecord;
use crate::mapping::{Origin, Stage};
use crate::paths::PathBundle;

fn origin(o: Origin) -> &'static str {
    match o {
        Origin::Question => "question",
        Origin::Answer => "answer",
    }
}

pub fn render_mapping(r: &CotRecord) -> String {
    let mut out = String::new();
    if r.mentions.is_empty() {
        out.push_str("mentions: (none)\n");
    } else {
        out.push_str("mentions:\n");
        for m in &r.mentions {
            let _ = writeln!(out, "  {}#{} {:?}", origin(m.origin), m.ordinal, m.surface);
        }
    }
    if !r.mapping.mapped.is_empty() {
        out.push_str("mapping:\n");
        for e in &r.mapping.mapped {
            let stage = match (e.stage, e.score) {
                (Stage::Similarity, Some(s)) => format!("similarity {s:.3}"),
                (Stage::Exact, _) => "exact".into(),
                (Stage::Similarity, None) => "similarity".into(),
                (Stage::LlmSelected, _) => "llm-selected".into(),
            };
            let _ = writeln!(
                out,
                "  {} {:?} -> {} [{}] ({stage})",
                origin(e.mention.origin),
                e.mention.surface,
                e.node_name,
                e.node
            );
        }
    }
    for u in &r.mapping.unmapped {
        let reason =
            serde_json::to_value(u.reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(out, "  {} {:?} unmapped ({reason})", origin(u.mention.origin), u.mention.surface);
    }
    out
}

pub fn render_paths(bundle: &PathBundle) -> String {
    let mut out = String::new();
    if bundle.pairs.is_empty() {
        out.push_str("paths: (empty)\n");
        return out;
    }
    out.push_str("paths:\n");
    for p in &bundle.pairs {
        let status =
            serde_json::to_value(p.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = write!(out, "  pair {} -> {}: {status}", p.question, p.answer);
        if p.found > 0 {
            let _ = write!(out, ", {} found, {} kept", p.found, p.kept);
        }
        if p.truncated {
            out.push_str(", truncated");
        }
        if p.fallback {
            out.push_str(", prune fallback");
        }
        out.push('\n');
        for path in bundle.paths.iter().filter(|x| x.pair == (p.question, p.answer)) {
            let _ = writeln!(out, "    {}", path.render());
        }
    }
    if bundle.paths.is_empty() {
        out.push_str("  (no paths)\n");
    }
    out
}

/// Full trace: input, mapping, paths, reasoning and verdict.
pub fn render_trace(r: &CotRecord) -> String {
    let mut out = String::new();
    let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let _ = writeln!(out, "record {} [{}]", r.qa.id, r.qa.source);
    let _ = write!(out, "status: {status}");
    if let Some(reason) = r.reason {
        let _ = write!(out, " ({})", reason.as_str());
    }
    out.push('\n');
    if let Some(d) = &r.detail {
        let _ = writeln!(out, "detail: {d}");
    }
    let _ = writeln!(out, "question: {}", r.qa.question_block().replace('\n', "\n  "));
    let _ = writeln!(out, "gold: {}", r.qa.answer_text());
    out.push_str(&render_mapping(r));
    out.push_str(&render_paths(&r.bundle));
    if let Some(cot) = &r.cot {
        let _ = writeln!(out, "reasoning:\n  {}", cot.replace('\n', "\n  "));
    }
    if let Some(v) = &r.verdict {
        let _ = writeln!(
            out,
            "verdict: predicted {:?}, {}{}",
            v.predicted,
            if v.matched { "matched" } else { "not matched" },
            if v.parse_failure { " (parse failure)" } else { "" }
        );
    }
    out
}
