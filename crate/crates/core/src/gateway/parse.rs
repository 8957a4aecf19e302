//! Maps free model text onto taxonomy labels.
//!
//! The answer is split into tokens on newlines, commas and semicolons. Each
//! token is matched against the offered choices by display name through a
//! cascade: exact, then normalized (case-folded, numbering and surrounding
//! punctuation stripped, whitespace collapsed), then fuzzy (edit distance
//! `<= max(1, ceil(len / 10))` with a unique nearest choice). Ties and misses
//! go to `unparsed_fragments`. Adjacent comma-separated tokens are first
//! tried together, longest span first, so names containing commas match.

use serde::{Deserialize, Serialize};

use super::template::Choice;
use crate::taxonomy::{LabelId, Taxonomy};

/// Longest run of comma-joined tokens tried as a single name.
const MAX_SPAN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Exact,
    Normalized,
    Fuzzy,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabels {
    pub labels: Vec<LabelId>,
    #[serde(default)]
    pub unparsed_fragments: Vec<String>,
    pub parse_status: ParseStatus,
}

impl ParsedLabels {
    pub fn failed(fragments: Vec<String>) -> Self {
        ParsedLabels {
            labels: Vec::new(),
            unparsed_fragments: fragments,
            parse_status: ParseStatus::Failed,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.parse_status == ParseStatus::Failed
    }
}

/// Parses against the taxonomy's labels.
pub fn parse_labels(raw: &str, taxonomy: &Taxonomy, cap: Option<usize>) -> ParsedLabels {
    let choices: Vec<Choice> = taxonomy.labels().iter().map(Choice::from).collect();
    parse_choices(raw, &choices, cap)
}

/// Parses against an arbitrary option list (subtopics, survivors, ...).
pub fn parse_choices(raw: &str, choices: &[Choice], cap: Option<usize>) -> ParsedLabels {
    let tokens = tokenize(raw);
    if tokens.is_empty() {
        return ParsedLabels::failed(Vec::new());
    }
    let normalized: Vec<String> = choices.iter().map(|c| normalize(&c.name)).collect();

    let mut labels: Vec<LabelId> = Vec::new();
    let mut fragments = Vec::new();
    let mut worst = ParseStatus::Exact;
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        // Multi-token spans joined across commas: exact or normalized only.
        let mut end = i + 1;
        while end < tokens.len() && end - i < MAX_SPAN && tokens[end - 1].1 == ',' {
            end += 1;
        }
        for j in (i + 2..=end).rev() {
            let joined = tokens[i..j].iter().map(|t| t.0.as_str()).collect::<Vec<_>>().join(", ");
            if let Some(hit) = match_strict(&joined, choices, &normalized) {
                matched = Some((hit, j));
                break;
            }
        }
        let (hit, next) = match matched {
            Some(m) => (Some(m.0), m.1),
            None => (match_token(&tokens[i].0, choices, &normalized), i + 1),
        };
        match hit {
            Some((idx, status)) => {
                let id = &choices[idx].id;
                if !labels.contains(id) {
                    labels.push(id.clone());
                    worst = worst.max(status);
                }
            }
            None => fragments.push(tokens[i].0.clone()),
        }
        i = next;
    }

    if labels.is_empty() {
        return ParsedLabels::failed(fragments);
    }
    if let Some(cap) = cap {
        labels.truncate(cap);
    }
    ParsedLabels {
        labels,
        unparsed_fragments: fragments,
        parse_status: worst,
    }
}

/// Tokens with the separator that followed them (`'\0'` at the end).
fn tokenize(raw: &str) -> Vec<(String, char)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in raw.chars() {
        if matches!(c, '\n' | ',' | ';') {
            let t = cur.trim();
            if !t.is_empty() {
                out.push((t.to_string(), c));
            }
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    let t = cur.trim();
    if !t.is_empty() {
        out.push((t.to_string(), '\0'));
    }
    out
}

fn match_strict(token: &str, choices: &[Choice], normalized: &[String]) -> Option<(usize, ParseStatus)> {
    if let Some(i) = choices.iter().position(|c| c.name == token) {
        return Some((i, ParseStatus::Exact));
    }
    let n = normalize(token);
    if n.is_empty() {
        return None;
    }
    normalized.iter().position(|c| *c == n).map(|i| (i, ParseStatus::Normalized))
}

fn match_token(token: &str, choices: &[Choice], normalized: &[String]) -> Option<(usize, ParseStatus)> {
    if let Some(hit) = match_strict(token, choices, normalized) {
        return Some(hit);
    }
    let n = normalize(token);
    if n.is_empty() {
        return None;
    }
    let mut best: Option<(usize, usize)> = None;
    let mut tied = false;
    for (i, name) in normalized.iter().enumerate() {
        let d = strsim::levenshtein(&n, name);
        if d > fuzzy_threshold(name) {
            continue;
        }
        match best {
            Some((_, bd)) if d > bd => {}
            Some((_, bd)) if d == bd => tied = true,
            _ => {
                best = Some((i, d));
                tied = false;
            }
        }
    }
    match best {
        Some((i, _)) if !tied => Some((i, ParseStatus::Fuzzy)),
        _ => None,
    }
}

/// `max(1, ceil(len / 10))` over the label's normalized length in chars.
pub fn fuzzy_threshold(name: &str) -> usize {
    name.chars().count().div_ceil(10).max(1)
}

/// Case-folds, strips list numbering, bullets and surrounding punctuation or
/// quotes, and collapses internal whitespace.
pub fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut t = lowered.trim();
    loop {
        let before = t;
        t = t.trim_start_matches(|c: char| matches!(c, '-' | '*' | '•' | '#' | '>')).trim_start();
        t = strip_numbering(t).trim();
        t = t.trim_matches(|c: char| !c.is_alphanumeric()).trim();
        if t == before {
            break;
        }
    }
    t.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops a leading `3.`, `3)`, `(3)` or `3:` marker.
fn strip_numbering(s: &str) -> &str {
    let body = s.strip_prefix('(').unwrap_or(s);
    let digits = body.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return s;
    }
    let rest = &body[digits..];
    match rest.chars().next() {
        Some('.') | Some(')') | Some(':') => &rest[1..],
        _ => s,
    }
}
