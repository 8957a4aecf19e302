use futures::future::join_all;
use serde::{Deserialize, Serialize};

use super::{Strategy, StrategyError, StrategyKind, NONE_OPTION};
use crate::corpus::Document;
use crate::gateway::{parse_choices, Choice, CompletionRecord, ParseStatus, ParsedLabels};
use crate::taxonomy::{LabelId, Taxonomy};

/// Successful outcome of one strategy on one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// Labels of the top level of the taxonomy.
    pub parsed: ParsedLabels,
    pub calls: u32,
    pub completions: Vec<CompletionRecord>,
    /// Iterative only: no area survived and a zero-shot call decided.
    #[serde(default)]
    pub fallback: bool,
    /// Iterative only: areas whose stage-A answer was not None.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub survivors: Vec<LabelId>,
    /// Subtopics chosen along the way (direct and iterative).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subtopics: Vec<LabelId>,
}

/// A strategy that produced no label, with whatever calls it made.
#[derive(Debug)]
pub struct ClassifyFailure {
    pub error: StrategyError,
    pub calls: u32,
    pub completions: Vec<CompletionRecord>,
}

impl ClassifyFailure {
    fn new(error: impl Into<StrategyError>, completions: Vec<CompletionRecord>) -> Self {
        ClassifyFailure {
            error: error.into(),
            calls: completions.len() as u32,
            completions,
        }
    }
}

impl std::fmt::Display for ClassifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} calls)", self.error, self.calls)
    }
}

type Outcome = Result<Classification, ClassifyFailure>;

impl Strategy {
    /// Runs this strategy on one document.
    pub async fn classify(&self, doc: &Document, taxonomy: &Taxonomy) -> Outcome {
        match self.config.kind {
            StrategyKind::ZeroShot => self.zero_shot(doc, taxonomy).await,
            StrategyKind::Direct => self.direct(doc, taxonomy).await,
            StrategyKind::Iterative => self.iterative(doc, taxonomy).await,
        }
    }

    fn tag(&self, doc: &Document, stage: &str) -> Option<String> {
        Some(format!("{}/{}/{}", doc.id, self.id(), stage))
    }

    async fn call(
        &self,
        doc: &Document,
        stage: &str,
        messages: Vec<crate::gateway::ChatMessage>,
    ) -> Result<CompletionRecord, StrategyError> {
        Ok(self.client.complete_tagged(&messages, self.tag(doc, stage)).await?)
    }

    async fn zero_shot(&self, doc: &Document, taxonomy: &Taxonomy) -> Outcome {
        let choices: Vec<Choice> = taxonomy.labels().iter().map(Choice::from).collect();
        let cap = taxonomy.max_labels().unwrap_or(taxonomy.len());
        let rendered = if taxonomy.is_exclusive() {
            self.templates.zero_shot.render_with(&doc.text, &choices, &[])
        } else {
            let cap_s = cap.to_string();
            self.templates
                .zero_shot_multi
                .render_with(&doc.text, &choices, &[("max_labels", &cap_s)])
        };
        let messages = rendered.map_err(|e| ClassifyFailure::new(e, vec![]))?;
        let record = self
            .call(doc, "zero_shot", messages)
            .await
            .map_err(|e| ClassifyFailure::new(e, vec![]))?;
        let parsed = parse_choices(&record.raw_text, &choices, Some(cap));
        if parsed.is_failed() {
            let err = StrategyError::Unparsed {
                raw: record.raw_text.clone(),
                fragments: parsed.unparsed_fragments,
            };
            return Err(ClassifyFailure::new(err, vec![record]));
        }
        Ok(Classification {
            parsed: with_canonical_order(parsed, taxonomy),
            calls: 1,
            completions: vec![record],
            fallback: false,
            survivors: vec![],
            subtopics: vec![],
        })
    }

    async fn direct(&self, doc: &Document, taxonomy: &Taxonomy) -> Outcome {
        if !taxonomy.is_hierarchical() {
            return Err(ClassifyFailure::new(StrategyError::NotHierarchical(StrategyKind::Direct), vec![]));
        }
        let choices: Vec<Choice> = taxonomy.all_subtopics().map(Choice::from).collect();
        let messages = self
            .templates
            .direct
            .render_with(&doc.text, &choices, &[])
            .map_err(|e| ClassifyFailure::new(e, vec![]))?;
        let record = self
            .call(doc, "direct", messages)
            .await
            .map_err(|e| ClassifyFailure::new(e, vec![]))?;
        let parsed = parse_choices(&record.raw_text, &choices, Some(1));
        let Some(sub) = parsed.labels.first().cloned() else {
            let err = StrategyError::Unparsed {
                raw: record.raw_text.clone(),
                fragments: parsed.unparsed_fragments,
            };
            return Err(ClassifyFailure::new(err, vec![record]));
        };
        let parent = taxonomy.parent_of(&sub).expect("subtopic has a parent").clone();
        Ok(Classification {
            parsed: ParsedLabels {
                labels: vec![parent],
                unparsed_fragments: parsed.unparsed_fragments,
                parse_status: parsed.parse_status,
            },
            calls: 1,
            completions: vec![record],
            fallback: false,
            survivors: vec![],
            subtopics: vec![sub],
        })
    }

    async fn iterative(&self, doc: &Document, taxonomy: &Taxonomy) -> Outcome {
        check_iterative(taxonomy).map_err(|e| ClassifyFailure::new(e, vec![]))?;

        let none_id = LabelId::new("\u{0}none");
        let none_choice = Choice { id: none_id.clone(), name: NONE_OPTION.to_string(), description: String::new() };
        let areas: Vec<_> = taxonomy.macro_areas().collect();

        // Stage A: one independent call per area.
        let mut prompts = Vec::with_capacity(areas.len());
        for (i, (label, subs)) in areas.iter().enumerate() {
            let mut choices: Vec<Choice> = subs.iter().map(Choice::from).collect();
            choices.push(none_choice.clone());
            let messages = self
                .templates
                .area
                .render_with(&doc.text, &choices, &[("area", label.display_name.as_str())])
                .map_err(|e| ClassifyFailure::new(e, vec![]))?;
            prompts.push((i, choices, messages));
        }
        let areas_ref = &areas;
        let results = join_all(prompts.into_iter().map(|(i, choices, messages)| async move {
            let r = self.call(doc, &format!("stage-a/{}", areas_ref[i].0.id), messages).await;
            (i, choices, r)
        }))
        .await;

        let mut completions = Vec::with_capacity(areas.len() + 1);
        let mut first_error = None;
        let mut survivors = Vec::new();
        let mut subtopics = Vec::new();
        let mut worst = ParseStatus::Exact;
        let mut fragments = Vec::new();
        for (i, choices, r) in results {
            match r {
                Ok(record) => {
                    let parsed = parse_choices(&record.raw_text, &choices, Some(1));
                    fragments.extend(parsed.unparsed_fragments.iter().cloned());
                    match parsed.labels.first() {
                        Some(id) if *id != none_id => {
                            survivors.push(areas[i].0.id.clone());
                            subtopics.push(id.clone());
                            worst = worst.max(parsed.parse_status);
                        }
                        // None, or nothing recognisable: the area drops out.
                        _ => {}
                    }
                    completions.push(record);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(ClassifyFailure::new(e, completions));
        }

        // Degenerate paths.
        if survivors.is_empty() {
            return self.fallback(doc, taxonomy, completions).await;
        }
        if survivors.len() == 1 && !self.config.force_final_choice {
            return Ok(Classification {
                parsed: ParsedLabels { labels: survivors.clone(), unparsed_fragments: fragments, parse_status: worst },
                calls: completions.len() as u32,
                completions,
                fallback: false,
                survivors,
                subtopics,
            });
        }

        // Stage B: forced choice among the surviving areas.
        let choices: Vec<Choice> = survivors
            .iter()
            .map(|id| Choice::from(taxonomy.label(id).expect("survivor is a label")))
            .collect();
        let messages = match self.templates.final_choice.render_with(&doc.text, &choices, &[]) {
            Ok(m) => m,
            Err(e) => return Err(ClassifyFailure::new(e, completions)),
        };
        let record = match self.call(doc, "stage-b", messages).await {
            Ok(r) => r,
            Err(e) => return Err(ClassifyFailure::new(e, completions)),
        };
        let parsed = parse_choices(&record.raw_text, &choices, Some(1));
        let raw = record.raw_text.clone();
        completions.push(record);
        if parsed.is_failed() {
            let err = StrategyError::FinalChoiceUnparsed {
                raw,
                fragments: parsed.unparsed_fragments,
                survivors: survivors.iter().map(|s| s.to_string()).collect(),
            };
            return Err(ClassifyFailure::new(err, completions));
        }
        fragments.extend(parsed.unparsed_fragments);
        Ok(Classification {
            parsed: ParsedLabels {
                labels: parsed.labels,
                unparsed_fragments: fragments,
                parse_status: worst.max(parsed.parse_status),
            },
            calls: completions.len() as u32,
            completions,
            fallback: false,
            survivors,
            subtopics,
        })
    }

    /// Zero-shot over the macro areas when stage A found nothing.
    async fn fallback(&self, doc: &Document, taxonomy: &Taxonomy, mut completions: Vec<CompletionRecord>) -> Outcome {
        let choices: Vec<Choice> = taxonomy.macro_areas().map(|(l, _)| Choice::from(l)).collect();
        let messages = match self.templates.zero_shot.render_with(&doc.text, &choices, &[]) {
            Ok(m) => m,
            Err(e) => return Err(ClassifyFailure::new(e, completions)),
        };
        let record = match self.call(doc, "fallback", messages).await {
            Ok(r) => r,
            Err(e) => return Err(ClassifyFailure::new(e, completions)),
        };
        let parsed = parse_choices(&record.raw_text, &choices, Some(1));
        let raw = record.raw_text.clone();
        completions.push(record);
        if parsed.is_failed() {
            let err = StrategyError::Unparsed { raw, fragments: parsed.unparsed_fragments };
            return Err(ClassifyFailure::new(err, completions));
        }
        Ok(Classification {
            parsed,
            calls: completions.len() as u32,
            completions,
            fallback: true,
            survivors: vec![],
            subtopics: vec![],
        })
    }
}

/// Iterative prompts offer a literal None; no area or subtopic may share it.
pub(crate) fn check_iterative(taxonomy: &Taxonomy) -> Result<(), StrategyError> {
    if !taxonomy.is_hierarchical() {
        return Err(StrategyError::NotHierarchical(StrategyKind::Iterative));
    }
    let reserved = crate::gateway::parse::normalize(NONE_OPTION);
    for (label, subs) in taxonomy.macro_areas() {
        if crate::gateway::parse::normalize(&label.display_name) == reserved {
            return Err(StrategyError::ReservedNone(label.id.to_string()));
        }
        for s in subs {
            if crate::gateway::parse::normalize(&s.display_name) == reserved {
                return Err(StrategyError::ReservedNone(s.id.to_string()));
            }
        }
    }
    Ok(())
}

fn with_canonical_order(mut parsed: ParsedLabels, taxonomy: &Taxonomy) -> ParsedLabels {
    // Exclusive answers hold a single label; for multi-label keep the model's
    // ranking, since the cap already cut the tail.
    if taxonomy.is_exclusive() {
        parsed.labels = taxonomy.canonical_order(parsed.labels);
    }
    parsed
}
