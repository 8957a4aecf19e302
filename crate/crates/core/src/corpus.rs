//! Canonical document corpora: ingestion from CSV/JSONL, JSONL writing and
//! train/test splitting.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{LabelId, Taxonomy};

/// Guards `floor(ratio * n)` against representation error (0.29 * 100 = 28.999...).
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_labels: Option<Vec<LabelId>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    taxonomy: Arc<Taxonomy>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in csv header")]
    MissingColumn(String),
    #[error("rows with empty id: {0:?}")]
    EmptyIds(Vec<u64>),
    #[error("duplicate document ids: {}", format_dups(.0))]
    DuplicateIds(Vec<(String, Vec<u64>)>),
    #[error("unknown label `{token}` on row {row}")]
    UnknownLabel { token: String, row: u64 },
    #[error("invalid labels on row {row}: {message}")]
    InvalidLabels { row: u64, message: String },
    #[error("malformed json on line {line}: {message}")]
    Json { line: u64, message: String },
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("split needs at least 2 documents, corpus has {0}")]
    TooFewDocuments(usize),
    #[error("stratified split requires an exclusive taxonomy")]
    StratifyMultiLabel,
    #[error("stratified split requires gold labels; missing on {0:?}")]
    StratifyMissingLabels(Vec<String>),
}

fn format_dups(d: &[(String, Vec<u64>)]) -> String {
    d.iter()
        .map(|(id, rows)| format!("`{id}` on rows {rows:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Column names for [`ingest_csv`].
#[derive(Debug, Clone)]
pub struct CsvMapping {
    pub id_col: String,
    pub text_col: String,
    pub label_col: Option<String>,
    pub label_delim: char,
}

impl Default for CsvMapping {
    fn default() -> Self {
        CsvMapping {
            id_col: "id".into(),
            text_col: "text".into(),
            label_col: None,
            label_delim: ';',
        }
    }
}

/// Result of an ingest: the corpus plus rows dropped for empty text.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub dropped_empty: Vec<u64>,
}

impl Corpus {
    fn from_parts(documents: Vec<Document>, taxonomy: Arc<Taxonomy>) -> Self {
        let by_id = documents.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        Corpus { documents, taxonomy, by_id }
    }

    /// Builds a corpus, enforcing id uniqueness, non-empty text and label validity.
    pub fn new(documents: Vec<Document>, taxonomy: Arc<Taxonomy>) -> Result<Self, CorpusError> {
        let rows: Vec<(u64, Document)> = documents
            .into_iter()
            .enumerate()
            .map(|(i, d)| (i as u64 + 1, d))
            .collect();
        build(rows, taxonomy).map(|i| i.corpus)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    /// Document count (`n`).
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn index(&self) -> HashMap<&str, &Document> {
        self.documents.iter().map(|d| (d.id.as_str(), d)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d).expect("document serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let io = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    fn subset(&self, mut idx: Vec<usize>) -> Corpus {
        idx.sort_unstable();
        Corpus::from_parts(idx.into_iter().map(|i| self.documents[i].clone()).collect(), self.taxonomy.clone())
    }
}

fn build(rows: Vec<(u64, Document)>, taxonomy: Arc<Taxonomy>) -> Result<Ingested, CorpusError> {
    let mut empty_ids = Vec::new();
    let mut seen: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut dropped_empty = Vec::new();
    let mut documents = Vec::with_capacity(rows.len());

    for (row, mut doc) in rows {
        doc.id = doc.id.trim().to_string();
        if doc.id.is_empty() {
            empty_ids.push(row);
            continue;
        }
        seen.entry(doc.id.clone()).or_default().push(row);
        doc.text = doc.text.trim().to_string();
        if doc.text.is_empty() {
            dropped_empty.push(row);
            continue;
        }
        if let Some(labels) = doc.true_labels.take() {
            taxonomy
                .check_labels(&labels)
                .map_err(|message| CorpusError::InvalidLabels { row, message })?;
            doc.true_labels = Some(taxonomy.canonical_order(labels));
        }
        documents.push(doc);
    }

    if !empty_ids.is_empty() {
        return Err(CorpusError::EmptyIds(empty_ids));
    }
    let dups: Vec<_> = seen.into_iter().filter(|(_, rows)| rows.len() > 1).collect();
    if !dups.is_empty() {
        return Err(CorpusError::DuplicateIds(dups));
    }
    Ok(Ingested {
        corpus: Corpus::from_parts(documents, taxonomy),
        dropped_empty,
    })
}

fn resolve_tokens(
    tokens: impl IntoIterator<Item = String>,
    taxonomy: &Taxonomy,
    row: u64,
) -> Result<Vec<LabelId>, CorpusError> {
    tokens
        .into_iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .map(|t| {
            taxonomy
                .resolve_token(&t)
                .ok_or(CorpusError::UnknownLabel { token: t, row })
        })
        .collect()
}

/// Imports a CSV file. Row numbers in errors are file line numbers.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    mapping: &CsvMapping,
    taxonomy: Arc<Taxonomy>,
) -> Result<Ingested, CorpusError> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
    };
    let id_col = col(&mapping.id_col)?;
    let text_col = col(&mapping.text_col)?;
    let label_col = mapping.label_col.as_deref().map(col).transpose()?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let true_labels = match label_col {
            Some(c) => {
                let cell = field(c);
                let labels = resolve_tokens(
                    cell.split(mapping.label_delim).map(str::to_string),
                    &taxonomy,
                    row,
                )?;
                (!labels.is_empty()).then_some(labels)
            }
            None => None,
        };
        rows.push((
            row,
            Document {
                id: field(id_col),
                text: field(text_col),
                true_labels,
                source: path.as_ref().display().to_string(),
            },
        ));
    }
    build(rows, taxonomy)
}

#[derive(Deserialize)]
struct JsonlRow {
    id: serde_json::Value,
    text: String,
    #[serde(default)]
    true_labels: Option<Vec<String>>,
    #[serde(default)]
    source: Option<String>,
}

/// Parses corpus JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(text: &str, taxonomy: Arc<Taxonomy>) -> Result<Ingested, CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonlRow = serde_json::from_str(line).map_err(|e| CorpusError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                return Err(CorpusError::Json {
                    line: line_no,
                    message: format!("id must be a string, got {other}"),
                })
            }
        };
        let true_labels = match raw.true_labels {
            Some(tokens) => Some(resolve_tokens(tokens, &taxonomy, line_no)?),
            None => None,
        };
        rows.push((
            line_no,
            Document {
                id,
                text: raw.text,
                true_labels,
                source: raw.source.unwrap_or_default(),
            },
        ));
    }
    build(rows, taxonomy)
}

pub fn ingest_jsonl(path: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Ingested, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_jsonl(&text, taxonomy)
}

/// Number of training documents for a split of `n` at `ratio`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + FLOOR_EPS).floor() as usize
}

/// Per-class training counts: floor of each class share, remainder handed to
/// the largest fractional parts (ties broken by class order).
pub fn stratified_counts(class_sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let target = train_size(total, ratio);
    let exact: Vec<f64> = class_sizes.iter().map(|&c| ratio * c as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| (x + FLOOR_EPS).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &j in order.iter().take(target.saturating_sub(assigned)) {
        if counts[j] < class_sizes[j] {
            counts[j] += 1;
        }
    }
    counts
}

/// Deterministic train/test split. Train size is `floor(ratio * n)`; the
/// remainder goes to test. Each part keeps the corpus' document order.
pub fn split_train_test(
    corpus: &Corpus,
    ratio: f64,
    seed: u64,
    stratify_by_label: bool,
) -> Result<(Corpus, Corpus), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(CorpusError::TooFewDocuments(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let train_idx: Vec<usize> = if stratify_by_label {
        if !corpus.taxonomy.is_exclusive() {
            return Err(CorpusError::StratifyMultiLabel);
        }
        let missing: Vec<String> = corpus
            .documents
            .iter()
            .filter(|d| d.true_labels.as_ref().map_or(true, |l| l.len() != 1))
            .map(|d| d.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CorpusError::StratifyMissingLabels(missing));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.taxonomy.len()];
        for (i, d) in corpus.documents.iter().enumerate() {
            let label = &d.true_labels.as_ref().unwrap()[0];
            by_class[corpus.taxonomy.index_of(label).unwrap()].push(i);
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let counts = stratified_counts(&sizes, ratio);
        let mut train = Vec::new();
        for (members, k) in by_class.iter_mut().zip(counts) {
            members.shuffle(&mut rng);
            train.extend_from_slice(&members[..k]);
        }
        train
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(train_size(n, ratio));
        idx
    };

    let mut in_train = vec![false; n];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let test_idx = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((corpus.subset(train_idx), corpus.subset(test_idx)))
}
