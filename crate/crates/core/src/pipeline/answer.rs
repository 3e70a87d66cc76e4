//! Comparing a predicted answer with the gold answer.
//!
//! Multiple-choice rules (version 1), tried in order on the text after the
//! last `Final answer:` marker, or on the whole reply when there is none:
//!
//! 1. the text is a bare label, optionally wrapped as `(B)`, `B.`, `Option B`;
//! 2. the text contains `answer is <label>` / `answer: <label>`;
//! 3. exactly one option text occurs in the reply as whole words.
//!
//! A rule that finds two different labels (`B or C`) rejects outright.
//! Yes/no/maybe golds without options are treated as three options labelled
//! by the words themselves. Open answers compare case-folded text with
//! punctuation removed.

use std::sync::OnceLock;

use regex::Regex;

use super::qa::{AnswerOption, QaPair};

pub const MATCH_RULES_VERSION: u32 = 1;

/// Lowercase, punctuation to spaces, collapsed whitespace.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Text after the last `Final answer:` marker, if any.
pub fn final_segment(reply: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)final\s+answer\s*[:：]").unwrap());
    match re.find_iter(reply).last() {
        Some(m) => reply[m.end()..].trim(),
        None => reply.trim(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Found<'a> {
    None,
    One(&'a AnswerOption),
    Ambiguous,
}

fn label_of<'a>(token: &str, options: &'a [AnswerOption]) -> Option<&'a AnswerOption> {
    let t = token.trim_matches(|c: char| !c.is_alphanumeric());
    options.iter().find(|o| o.label.eq_ignore_ascii_case(t))
}

fn bare_label<'a>(segment: &str, options: &'a [AnswerOption]) -> Found<'a> {
    let words = normalize(segment);
    let words = words.strip_prefix("option ").or_else(|| words.strip_prefix("choice ")).unwrap_or(&words);
    match label_of(words, options) {
        Some(o) if !words.contains(' ') => Found::One(o),
        _ => Found::None,
    }
}

fn answer_is<'a>(segment: &str, options: &'a [AnswerOption]) -> Found<'a> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)answer\s*(?:is|:)\s*(?:option\s+|choice\s+)?\(?([\p{L}\p{N}]+)\)?((?:\s*(?:or|and|/|,)\s*\(?[\p{L}\p{N}]+\)?)*)")
            .unwrap()
    });
    let mut found = Found::None;
    for caps in re.captures_iter(segment) {
        let head = caps.get(1).unwrap();
        // "the answer is a <noun>": an article, not label A
        let rest = &segment[head.end()..];
        if head.as_str() == "a" && rest.starts_with(' ') && rest[1..].starts_with(char::is_alphabetic) {
            continue;
        }
        let Some(first) = label_of(head.as_str(), options) else { continue };
        let mut labels = vec![first];
        for tok in caps[2].split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            if let Some(o) = label_of(tok, options) {
                labels.push(o);
            }
        }
        for o in labels {
            found = match found {
                Found::None => Found::One(o),
                Found::One(prev) if prev.label == o.label => Found::One(prev),
                _ => return Found::Ambiguous,
            };
        }
    }
    found
}

fn option_text<'a>(segment: &str, options: &'a [AnswerOption]) -> Found<'a> {
    let hay = format!(" {} ", normalize(segment));
    let hits: Vec<&AnswerOption> = options
        .iter()
        .filter(|o| {
            let needle = normalize(&o.text);
            !needle.is_empty() && hay.contains(&format!(" {needle} "))
        })
        .collect();
    match hits.as_slice() {
        [] => Found::None,
        [one] => Found::One(one),
        _ => Found::Ambiguous,
    }
}

/// Label picked out of `reply`, or `None` when no rule applies or a rule is
/// ambiguous.
pub fn extract_label<'a>(reply: &str, options: &'a [AnswerOption]) -> Option<&'a AnswerOption> {
    let segment = final_segment(reply);
    for rule in [bare_label, answer_is, option_text] {
        match rule(segment, options) {
            Found::One(o) => return Some(o),
            Found::Ambiguous => return None,
            Found::None => {}
        }
    }
    None
}

/// Options used for matching: the declared ones, or yes/no/maybe for such
/// golds, or none for open answers.
pub fn effective_options(qa: &QaPair) -> Option<Vec<AnswerOption>> {
    if let Some(o) = &qa.options {
        return Some(o.clone());
    }
    let gold = normalize(qa.answer.text.as_deref().unwrap_or(""));
    if matches!(gold.as_str(), "yes" | "no" | "maybe") {
        return Some(
            ["yes", "no", "maybe"].iter().map(|w| AnswerOption { label: w.to_string(), text: w.to_string() }).collect(),
        );
    }
    None
}

/// Parsed prediction: `(label, text)` for multiple choice, `(None, text)` for
/// open answers. `None` when nothing usable was found.
pub fn parse_prediction(reply: &str, qa: &QaPair) -> Option<(Option<String>, String)> {
    match effective_options(qa) {
        Some(options) => extract_label(reply, &options).map(|o| (Some(o.label.clone()), o.text.clone())),
        None => {
            let seg = final_segment(reply);
            (!normalize(seg).is_empty()).then(|| (None, seg.to_string()))
        }
    }
}

/// Whether `reply` states the gold answer of `qa`.
pub fn match_answer(reply: &str, qa: &QaPair) -> bool {
    match (parse_prediction(reply, qa), effective_options(qa)) {
        (Some((Some(label), _)), Some(_)) => {
            let gold = qa.answer.label.as_deref().or(qa.answer.text.as_deref()).unwrap_or("");
            label.eq_ignore_ascii_case(gold.trim()) || normalize(&label) == normalize(gold)
        }
        (Some((None, text)), None) => normalize(&text) == normalize(qa.answer.text.as_deref().unwrap_or("")),
        _ => false,
    }
}
