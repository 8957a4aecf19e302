//! Label universes: flat or two-level (macro area -> subtopics) taxonomies.
//!
//! Taxonomies are declared in TOML or JSON files. The three case-study
//! codebooks ship as fixtures under `fixtures/taxonomies/` and are also
//! embedded in the crate (see [`fixtures`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Identifier of a label within a taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub String);

impl LabelId {
    pub fn new(id: impl Into<String>) -> Self {
        LabelId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LabelId {
    fn from(s: &str) -> Self {
        LabelId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: LabelId,
    #[serde(rename = "name")]
    pub display_name: String,
    #[serde(default)]
    pub description: String,
    /// Optional display grouping (used by review layouts for wide taxonomies).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtopic {
    pub id: LabelId,
    #[serde(rename = "name")]
    pub display_name: String,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse taxonomy: {0}")]
    Parse(String),
    #[error("duplicate label id `{0}`")]
    DuplicateLabel(String),
    #[error("empty label id or display name at position {0}")]
    EmptyLabel(usize),
    #[error("taxonomy must declare at least 2 labels, found {0}")]
    TooFewLabels(usize),
    #[error("exclusive taxonomy must have max_labels = 1, found {0}")]
    ExclusiveCap(usize),
    #[error("max_labels must be positive")]
    ZeroCap,
    #[error("hierarchy key `{0}` is not a label id")]
    UnknownHierarchyKey(String),
    #[error("duplicate subtopic id `{0}`")]
    DuplicateSubtopic(String),
}

/// On-disk shape; converted into [`Taxonomy`] after validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub name: String,
    #[serde(default)]
    pub exclusive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_labels: Option<usize>,
    pub labels: Vec<Label>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hierarchy: BTreeMap<String, Vec<Subtopic>>,
}

/// A validated label universe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Taxonomy {
    name: String,
    labels: Vec<Label>,
    exclusive: bool,
    max_labels: Option<usize>,
    /// Macro areas in label order, each with its subtopics.
    hierarchy: Vec<(LabelId, Vec<Subtopic>)>,
    #[serde(skip)]
    index: HashMap<LabelId, usize>,
    #[serde(skip)]
    subtopic_parent: HashMap<LabelId, LabelId>,
}

impl Taxonomy {
    pub fn from_file(file: TaxonomyFile) -> Result<Self, TaxonomyError> {
        let mut index = HashMap::with_capacity(file.labels.len());
        for (pos, label) in file.labels.iter().enumerate() {
            if label.id.0.trim().is_empty() || label.display_name.trim().is_empty() {
                return Err(TaxonomyError::EmptyLabel(pos));
            }
            if index.insert(label.id.clone(), pos).is_some() {
                return Err(TaxonomyError::DuplicateLabel(label.id.0.clone()));
            }
        }
        if file.labels.len() < 2 {
            return Err(TaxonomyError::TooFewLabels(file.labels.len()));
        }
        let max_labels = match (file.exclusive, file.max_labels) {
            (_, Some(0)) => return Err(TaxonomyError::ZeroCap),
            (true, Some(cap)) if cap > 1 => return Err(TaxonomyError::ExclusiveCap(cap)),
            (true, _) => Some(1),
            (false, cap) => cap,
        };

        for key in file.hierarchy.keys() {
            if !index.contains_key(&LabelId::new(key.as_str())) {
                return Err(TaxonomyError::UnknownHierarchyKey(key.clone()));
            }
        }
        let mut subtopic_parent = HashMap::new();
        let mut hierarchy = Vec::new();
        for label in &file.labels {
            if let Some(subs) = file.hierarchy.get(label.id.as_str()) {
                for sub in subs {
                    if subtopic_parent
                        .insert(sub.id.clone(), label.id.clone())
                        .is_some()
                    {
                        return Err(TaxonomyError::DuplicateSubtopic(sub.id.0.clone()));
                    }
                }
                hierarchy.push((label.id.clone(), subs.clone()));
            }
        }

        Ok(Taxonomy {
            name: file.name,
            labels: file.labels,
            exclusive: file.exclusive,
            max_labels,
            hierarchy,
            index,
            subtopic_parent,
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(s).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_json_str(s: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            serde_json::from_str(s).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            name: self.name.clone(),
            exclusive: self.exclusive,
            max_labels: self.max_labels,
            labels: self.labels.clone(),
            hierarchy: self
                .hierarchy
                .iter()
                .map(|(k, v)| (k.0.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of labels (`M`).
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn is_exclusive(&self) -> bool {
        self.exclusive
    }

    pub fn max_labels(&self) -> Option<usize> {
        self.max_labels
    }

    pub fn index_of(&self, id: &LabelId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &LabelId) -> bool {
        self.index.contains_key(id)
    }

    pub fn label(&self, id: &LabelId) -> Option<&Label> {
        self.index_of(id).map(|i| &self.labels[i])
    }

    pub fn display_name<'a>(&'a self, id: &'a LabelId) -> &'a str {
        self.label(id).map(|l| l.display_name.as_str()).unwrap_or(id.as_str())
    }

    /// Resolves a token from a data file: label id first, then display name
    /// (exact, then case-insensitive).
    pub fn resolve_token(&self, token: &str) -> Option<LabelId> {
        let token = token.trim();
        let id = LabelId::new(token);
        if self.contains(&id) {
            return Some(id);
        }
        if let Some(l) = self.labels.iter().find(|l| l.display_name == token) {
            return Some(l.id.clone());
        }
        let lower = token.to_lowercase();
        self.labels
            .iter()
            .find(|l| l.display_name.to_lowercase() == lower)
            .map(|l| l.id.clone())
    }

    /// Sorts and deduplicates label ids by taxonomy order.
    pub fn canonical_order(&self, ids: impl IntoIterator<Item = LabelId>) -> Vec<LabelId> {
        let mut v: Vec<LabelId> = ids.into_iter().collect();
        v.sort_by_key(|id| self.index_of(id).unwrap_or(usize::MAX));
        v.dedup();
        v
    }

    pub fn is_hierarchical(&self) -> bool {
        !self.hierarchy.is_empty()
    }

    /// Macro areas (labels with subtopics) in taxonomy order.
    pub fn macro_areas(&self) -> impl Iterator<Item = (&Label, &[Subtopic])> {
        self.hierarchy
            .iter()
            .map(move |(id, subs)| (&self.labels[self.index[id]], subs.as_slice()))
    }

    pub fn subtopics(&self, macro_id: &LabelId) -> Option<&[Subtopic]> {
        self.hierarchy
            .iter()
            .find(|(id, _)| id == macro_id)
            .map(|(_, s)| s.as_slice())
    }

    pub fn all_subtopics(&self) -> impl Iterator<Item = &Subtopic> {
        self.hierarchy.iter().flat_map(|(_, s)| s.iter())
    }

    pub fn subtopic_count(&self) -> usize {
        self.subtopic_parent.len()
    }

    pub fn parent_of(&self, subtopic: &LabelId) -> Option<&LabelId> {
        self.subtopic_parent.get(subtopic)
    }

    /// SHA-256 over the canonical JSON form; pins a schema version for
    /// labeled data.
    pub fn sha(&self) -> String {
        let json = serde_json::to_vec(&self.to_file()).expect("taxonomy serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Checks that all ids exist and exclusivity holds.
    pub fn check_labels<'a>(&self, ids: impl IntoIterator<Item = &'a LabelId>) -> Result<(), String> {
        let mut seen = HashSet::new();
        for id in ids {
            if !self.contains(id) {
                return Err(format!("unknown label `{id}`"));
            }
            seen.insert(id);
        }
        if self.exclusive && seen.len() > 1 {
            return Err(format!("exclusive taxonomy allows one label, found {}", seen.len()));
        }
        Ok(())
    }
}

/// Loads a taxonomy from a `.toml` or `.json` file.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Taxonomy::from_json_str(&text),
        _ => Taxonomy::from_toml_str(&text),
    }
}

/// The three case-study codebooks, embedded.
pub mod fixtures {
    use super::Taxonomy;

    pub const CAP_TOML: &str = include_str!("../fixtures/taxonomies/cap.toml");
    pub const DATAVERSE_TOML: &str = include_str!("../fixtures/taxonomies/dataverse.toml");
    pub const FLOURISHING_TOML: &str = include_str!("../fixtures/taxonomies/flourishing.toml");

    /// Comparative Agendas Project: 19 major policy areas plus a `None` placeholder.
    pub fn cap() -> Taxonomy {
        Taxonomy::from_toml_str(CAP_TOML).expect("cap fixture is valid")
    }

    /// Dataverse subject categories: 15 labels, up to 3 per dataset.
    pub fn dataverse() -> Taxonomy {
        Taxonomy::from_toml_str(DATAVERSE_TOML).expect("dataverse fixture is valid")
    }

    /// Flourishing dimensions: 46 labels in six areas.
    pub fn flourishing() -> Taxonomy {
        Taxonomy::from_toml_str(FLOURISHING_TOML).expect("flourishing fixture is valid")
    }
}
