//! AI-crowd classification: per-document strategies and the ensemble that
//! merges their proposals.
//!
//! Three strategies are available:
//!
//! * **zero-shot**: one call offering every label of the taxonomy.
//! * **direct**: one call offering every subtopic of a two-level taxonomy;
//!   the chosen subtopic is mapped to its macro area.
//! * **iterative**: one call per macro area offering that area's subtopics
//!   or `None`, then one final call forced among the areas that survived.
//!   A taxonomy with `K` macro areas costs `K + 1` calls.

mod classify;
mod crowd;

pub use classify::{Classification, ClassifyFailure};
pub use crowd::{
    run_crowd, CandidateLabel, CrowdEntry, CrowdError, CrowdOptions, CrowdOutcome, CrowdResult,
    merge, EntryOutcome, Provenance, StrategyFailure,
};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, LlmClient, PromptTemplate, TemplateError, TemplateRegistry};

/// Literal offered in iterative stage-A prompts when no subtopic applies.
pub const NONE_OPTION: &str = "None";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    Direct,
    Iterative,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::Direct => "direct",
            StrategyKind::Iterative => "iterative",
        })
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_shot" | "zero-shot" => Ok(StrategyKind::ZeroShot),
            "direct" => Ok(StrategyKind::Direct),
            "iterative" => Ok(StrategyKind::Iterative),
            other => Err(format!("unknown strategy `{other}` (expected zero_shot, direct or iterative)")),
        }
    }
}

fn yes() -> bool {
    true
}

/// Template ids per stage; unset stages use the builtins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTemplates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_choice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Unique within a crowd run; defaults to `backend/kind`.
    #[serde(default)]
    pub id: String,
    pub kind: StrategyKind,
    pub backend: String,
    #[serde(default)]
    pub templates: StageTemplates,
    /// Iterative only: issue the final call even when a single area survives.
    #[serde(default = "yes")]
    pub force_final_choice: bool,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, backend: impl Into<String>) -> Self {
        let backend = backend.into();
        StrategyConfig {
            id: format!("{backend}/{kind}"),
            kind,
            backend,
            templates: StageTemplates::default(),
            force_final_choice: true,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn effective_id(&self) -> String {
        if self.id.is_empty() {
            format!("{}/{}", self.backend, self.kind)
        } else {
            self.id.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("strategy `{0}` requires a hierarchical taxonomy")]
    NotHierarchical(StrategyKind),
    #[error("label `{0}` collides with the reserved None option")]
    ReservedNone(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("could not parse a label from the model answer {raw:?}")]
    Unparsed { raw: String, fragments: Vec<String> },
    #[error("final choice among {survivors:?} could not be parsed from {raw:?}")]
    FinalChoiceUnparsed {
        raw: String,
        fragments: Vec<String>,
        survivors: Vec<String>,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl StrategyError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, StrategyError::Gateway(g) if g.is_unavailable())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedTemplates {
    zero_shot: PromptTemplate,
    zero_shot_multi: PromptTemplate,
    direct: PromptTemplate,
    area: PromptTemplate,
    final_choice: PromptTemplate,
}

/// A configured strategy bound to its backend client.
#[derive(Debug, Clone)]
pub struct Strategy {
    config: StrategyConfig,
    client: Arc<LlmClient>,
    templates: ResolvedTemplates,
}

impl Strategy {
    pub fn new(
        config: StrategyConfig,
        client: Arc<LlmClient>,
        registry: &TemplateRegistry,
    ) -> Result<Self, StrategyError> {
        let pick = |over: &Option<String>, default: &str| -> Result<PromptTemplate, StrategyError> {
            let id = over.as_deref().unwrap_or(default);
            registry
                .get(id)
                .cloned()
                .ok_or_else(|| StrategyError::UnknownTemplate(id.to_string()))
        };
        let t = &config.templates;
        let templates = ResolvedTemplates {
            zero_shot: pick(&t.zero_shot, "zero_shot")?,
            zero_shot_multi: pick(&t.zero_shot, "zero_shot_multi")?,
            direct: pick(&t.direct, "direct")?,
            area: pick(&t.area, "iterative_area")?,
            final_choice: pick(&t.final_choice, "iterative_final")?,
        };
        Ok(Strategy { config, client, templates })
    }

    /// Looks the backend up by name in `clients`.
    pub fn resolve(
        config: StrategyConfig,
        clients: &[Arc<LlmClient>],
        registry: &TemplateRegistry,
    ) -> Result<Self, StrategyError> {
        let client = clients
            .iter()
            .find(|c| c.name() == config.backend)
            .cloned()
            .ok_or_else(|| StrategyError::UnknownBackend(config.backend.clone()))?;
        Self::new(config, client, registry)
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn id(&self) -> String {
        self.config.effective_id()
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    pub fn client(&self) -> &Arc<LlmClient> {
        &self.client
    }
}
