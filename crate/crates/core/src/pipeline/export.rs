use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{split_train_test, Corpus, CorpusError, Document};
use crate::gateway::{Choice, PromptTemplate, TemplateError};
use crate::taxonomy::{LabelId, Taxonomy};
use crate::verification::ResolvedDocument;

/// Separator between label names in multi-label outputs.
pub const LABEL_DELIMITER: &str = "; ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub doc_id: String,
    pub taxonomy: String,
    pub template: String,
}

/// One instruction-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    /// The full prompt the tuned model will later receive.
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub ratio: f64,
    pub seed: u64,
    /// Emit one single-label example per surviving label instead of one
    /// multi-label example per document.
    pub per_label_replication: bool,
    /// Keep documents where nothing survived (output is empty).
    pub include_empty: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { ratio: 0.7, seed: 0, per_label_replication: false, include_empty: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub train_documents: usize,
    pub test_documents: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub skipped_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub counts: ExportCounts,
    pub seed: u64,
    pub ratio: f64,
    pub per_label_replication: bool,
    pub include_empty: bool,
    pub taxonomy: String,
    pub taxonomy_sha: String,
    pub template_id: String,
    pub template_sha: String,
    pub train_sha256: String,
    pub test_sha256: String,
    pub created_at: DateTime<Utc>,
    pub tool_version: String,
}

#[derive(Debug, Clone)]
pub struct FinetuneExport {
    pub train: Vec<FinetuneExample>,
    pub test: Vec<FinetuneExample>,
    pub manifest: ExportManifest,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{} documents are flagged as conflicts and need adjudication: {0:?}", .0.len())]
    Conflicts(Vec<String>),
    #[error("resolved document `{0}` is not in the corpus")]
    UnknownDocument(String),
    #[error("document `{doc}` has label `{label}` outside the taxonomy")]
    UnknownLabel { doc: String, label: String },
    #[error("nothing to export")]
    Empty,
    #[error(transparent)]
    Split(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("writing export: {0}")]
    Io(#[from] std::io::Error),
}

/// Canonical output string: names in taxonomy order, joined by `; `.
pub fn render_output(taxonomy: &Taxonomy, labels: &[LabelId]) -> String {
    taxonomy
        .canonical_order(labels.iter().cloned())
        .iter()
        .map(|l| taxonomy.display_name(l).to_string())
        .collect::<Vec<_>>()
        .join(LABEL_DELIMITER)
}

/// Reverse of [`render_output`].
pub fn parse_output(taxonomy: &Taxonomy, output: &str) -> Option<Vec<LabelId>> {
    if output.trim().is_empty() {
        return Some(Vec::new());
    }
    let ids: Option<Vec<LabelId>> = output.split(LABEL_DELIMITER).map(|n| taxonomy.resolve_token(n.trim())).collect();
    ids.map(|v| taxonomy.canonical_order(v))
}

/// Flattens a chat prompt into one instruction string.
pub fn instruction_text(template: &PromptTemplate, taxonomy: &Taxonomy, text: &str) -> Result<String, TemplateError> {
    let choices: Vec<Choice> = taxonomy.labels().iter().map(Choice::from).collect();
    let max = taxonomy.max_labels().unwrap_or(taxonomy.len()).to_string();
    let messages = template.render_with(text, &choices, &[("max_labels", &max)])?;
    Ok(messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n"))
}

fn sha_lines(examples: &[FinetuneExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(serde_json::to_vec(e).expect("example serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Builds train/test instruction datasets from resolved documents. The split
/// is over documents (seeded, independent of the template), so a document
/// never appears in both parts.
pub fn export_finetune(
    resolved: &[ResolvedDocument],
    corpus: &Corpus,
    template: &PromptTemplate,
    opts: &ExportOptions,
) -> Result<FinetuneExport, ExportError> {
    let conflicts: Vec<String> = resolved.iter().filter(|r| r.conflict).map(|r| r.doc_id.clone()).collect();
    if !conflicts.is_empty() {
        return Err(ExportError::Conflicts(conflicts));
    }
    let taxonomy = corpus.taxonomy();
    let by_id: HashMap<&str, &ResolvedDocument> = resolved.iter().map(|r| (r.doc_id.as_str(), r)).collect();
    for r in resolved {
        if corpus.get(&r.doc_id).is_none() {
            return Err(ExportError::UnknownDocument(r.doc_id.clone()));
        }
        if let Some(l) = r.surviving_labels.iter().find(|l| !taxonomy.contains(l)) {
            return Err(ExportError::UnknownLabel { doc: r.doc_id.clone(), label: l.to_string() });
        }
    }

    let mut skipped_empty = 0;
    let mut docs: Vec<Document> = Vec::new();
    for d in corpus.documents() {
        let Some(r) = by_id.get(d.id.as_str()) else { continue };
        if r.surviving_labels.is_empty() && !opts.include_empty {
            skipped_empty += 1;
            continue;
        }
        let mut d = d.clone();
        d.true_labels = Some(taxonomy.canonical_order(r.surviving_labels.iter().cloned()));
        docs.push(d);
    }
    if docs.len() < 2 {
        return Err(ExportError::Empty);
    }
    let pool = Corpus::new(docs, Arc::clone(taxonomy))?;
    let (train_c, test_c) = split_train_test(&pool, opts.ratio, opts.seed, false)?;

    let build = |part: &Corpus| -> Result<Vec<FinetuneExample>, ExportError> {
        let mut out = Vec::new();
        for d in part.documents() {
            let labels = d.true_labels.clone().unwrap_or_default();
            let instruction = instruction_text(template, taxonomy, &d.text)?;
            let meta = ExampleMeta { doc_id: d.id.clone(), taxonomy: taxonomy.name().to_string(), template: template.id.clone() };
            if opts.per_label_replication && labels.len() > 1 {
                for l in &labels {
                    out.push(FinetuneExample {
                        instruction: instruction.clone(),
                        input: d.text.clone(),
                        output: taxonomy.display_name(l).to_string(),
                        meta: meta.clone(),
                    });
                }
            } else {
                out.push(FinetuneExample {
                    instruction,
                    input: d.text.clone(),
                    output: render_output(taxonomy, &labels),
                    meta,
                });
            }
        }
        Ok(out)
    };
    let train = build(&train_c)?;
    let test = build(&test_c)?;

    let manifest = ExportManifest {
        counts: ExportCounts {
            train_documents: train_c.len(),
            test_documents: test_c.len(),
            train_examples: train.len(),
            test_examples: test.len(),
            skipped_empty,
        },
        seed: opts.seed,
        ratio: opts.ratio,
        per_label_replication: opts.per_label_replication,
        include_empty: opts.include_empty,
        taxonomy: taxonomy.name().to_string(),
        taxonomy_sha: taxonomy.sha(),
        template_id: template.id.clone(),
        template_sha: template.sha(),
        train_sha256: sha_lines(&train),
        test_sha256: sha_lines(&test),
        created_at: Utc::now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(FinetuneExport { train, test, manifest })
}

impl FinetuneExport {
    /// Writes `train.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), ExportError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::jsonl::write_all(dir.join("train.jsonl"), &self.train)?;
        crate::jsonl::write_all(dir.join("test.jsonl"), &self.test)?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}
