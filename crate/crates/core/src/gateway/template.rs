//! Prompt templates with `{placeholder}` substitution.
//!
//! Recognised placeholders: `{text}`, `{labels}`, `{label_descriptions}` and
//! any extra variables passed to [`PromptTemplate::render_with`] (the
//! strategies pass `{area}`). `{{` and `}}` produce literal braces; a brace
//! not followed by an identifier and `}` is copied through unchanged.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ChatMessage;
use crate::corpus::Document;
use crate::taxonomy::{Label, LabelId, Subtopic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRendering {
    #[default]
    Names,
    NamesWithDescriptions,
    Numbered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    #[serde(default)]
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub render_labels_as: LabelRendering,
}

/// An option offered to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Choice {
    pub id: LabelId,
    pub name: String,
    pub description: String,
}

impl From<&Label> for Choice {
    fn from(l: &Label) -> Self {
        Choice {
            id: l.id.clone(),
            name: l.display_name.clone(),
            description: l.description.clone(),
        }
    }
}

impl From<&Subtopic> for Choice {
    fn from(s: &Subtopic) -> Self {
        Choice {
            id: s.id.clone(),
            name: s.display_name.clone(),
            description: String::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` references unknown placeholder `{{{name}}}`")]
    Unresolved { template: String, name: String },
    #[error("template `{0}` renders an empty prompt")]
    Empty(String),
    #[error("failed to parse template: {0}")]
    Parse(String),
}

impl PromptTemplate {
    pub fn from_toml_str(s: &str) -> Result<Self, TemplateError> {
        toml::from_str(s).map_err(|e| TemplateError::Parse(e.to_string()))
    }

    pub fn sha(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("template serializes")))
    }

    pub fn render_with(
        &self,
        text: &str,
        choices: &[Choice],
        extra: &[(&str, &str)],
    ) -> Result<Vec<ChatMessage>, TemplateError> {
        let labels = render_choices(choices, self.render_labels_as);
        let descriptions = render_choices(choices, LabelRendering::NamesWithDescriptions);
        let lookup = |name: &str| -> Option<String> {
            match name {
                "text" => Some(text.to_string()),
                "labels" => Some(labels.clone()),
                "label_descriptions" => Some(descriptions.clone()),
                other => extra.iter().find(|(k, _)| *k == other).map(|(_, v)| v.to_string()),
            }
        };
        let system = substitute(&self.system, &lookup).map_err(|name| TemplateError::Unresolved {
            template: self.id.clone(),
            name,
        })?;
        let user = substitute(&self.user, &lookup).map_err(|name| TemplateError::Unresolved {
            template: self.id.clone(),
            name,
        })?;
        if user.trim().is_empty() && system.trim().is_empty() {
            return Err(TemplateError::Empty(self.id.clone()));
        }
        let mut messages = Vec::with_capacity(2);
        if !system.trim().is_empty() {
            messages.push(ChatMessage::system(system));
        }
        messages.push(ChatMessage::user(user));
        Ok(messages)
    }
}

/// Renders `template` for `doc` offering `choices` (kept in the given order).
pub fn render(
    template: &PromptTemplate,
    doc: &Document,
    choices: &[Choice],
) -> Result<Vec<ChatMessage>, TemplateError> {
    template.render_with(&doc.text, choices, &[])
}

fn render_choices(choices: &[Choice], how: LabelRendering) -> String {
    match how {
        LabelRendering::Names => choices.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", "),
        LabelRendering::Numbered => choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.name))
            .collect::<Vec<_>>()
            .join("\n"),
        LabelRendering::NamesWithDescriptions => choices
            .iter()
            .map(|c| {
                if c.description.is_empty() {
                    c.name.clone()
                } else {
                    format!("{}: {}", c.name, c.description)
                }
            })
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn substitute(src: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' && chars.get(i + 1) == Some(&'{') {
            out.push('{');
            i += 2;
            continue;
        }
        if c == '}' && chars.get(i + 1) == Some(&'}') {
            out.push('}');
            i += 2;
            continue;
        }
        if c == '{' && chars.get(i + 1).copied().is_some_and(is_ident_start) {
            let mut j = i + 1;
            while j < chars.len() && is_ident(chars[j]) {
                j += 1;
            }
            if chars.get(j) == Some(&'}') {
                let name: String = chars[i + 1..j].iter().collect();
                out.push_str(&lookup(&name).ok_or(name)?);
                i = j + 1;
                continue;
            }
        }
        out.push(c);
        i += 1;
    }
    Ok(out)
}

/// Templates by id: the builtins plus any loaded from disk.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: std::collections::HashMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut r = TemplateRegistry { templates: Default::default() };
        for t in builtin::all() {
            r.insert(t);
        }
        r
    }
}

impl TemplateRegistry {
    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.get(id)
    }

    /// Loads a template file (TOML) and registers it under its id.
    pub fn load_file(&mut self, path: impl AsRef<std::path::Path>) -> Result<PromptTemplate, TemplateError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| TemplateError::Parse(format!("{}: {e}", path.as_ref().display())))?;
        let t = PromptTemplate::from_toml_str(&text)?;
        self.insert(t.clone());
        Ok(t)
    }
}

/// Templates shipped with the crate. They are not taken from any published
/// codebook; adjust per project.
pub mod builtin {
    use super::PromptTemplate;

    pub const ZERO_SHOT: &str = include_str!("../../fixtures/templates/zero_shot.toml");
    pub const ZERO_SHOT_MULTI: &str = include_str!("../../fixtures/templates/zero_shot_multi.toml");
    pub const DIRECT: &str = include_str!("../../fixtures/templates/direct.toml");
    pub const ITERATIVE_AREA: &str = include_str!("../../fixtures/templates/iterative_area.toml");
    pub const ITERATIVE_FINAL: &str = include_str!("../../fixtures/templates/iterative_final.toml");
    pub const FINETUNE: &str = include_str!("../../fixtures/templates/finetune.toml");

    fn load(s: &str) -> PromptTemplate {
        PromptTemplate::from_toml_str(s).expect("builtin template is valid")
    }

    pub fn zero_shot() -> PromptTemplate {
        load(ZERO_SHOT)
    }

    pub fn zero_shot_multi() -> PromptTemplate {
        load(ZERO_SHOT_MULTI)
    }

    pub fn direct() -> PromptTemplate {
        load(DIRECT)
    }

    pub fn iterative_area() -> PromptTemplate {
        load(ITERATIVE_AREA)
    }

    pub fn iterative_final() -> PromptTemplate {
        load(ITERATIVE_FINAL)
    }

    pub fn finetune() -> PromptTemplate {
        load(FINETUNE)
    }

    pub fn all() -> Vec<PromptTemplate> {
        vec![zero_shot(), zero_shot_multi(), direct(), iterative_area(), iterative_final(), finetune()]
    }

    /// Looks a builtin up by id.
    pub fn by_id(id: &str) -> Option<PromptTemplate> {
        all().into_iter().find(|t| t.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choices() -> Vec<Choice> {
        ["A", "B"]
            .iter()
            .map(|n| Choice { id: LabelId::new(*n), name: n.to_string(), description: format!("about {n}") })
            .collect()
    }

    fn tpl(user: &str, how: LabelRendering) -> PromptTemplate {
        PromptTemplate { id: "t".into(), system: String::new(), user: user.into(), render_labels_as: how }
    }

    #[test]
    fn names_rendering() {
        let m = tpl("Classify: {text}\nOptions: {labels}", LabelRendering::Names)
            .render_with("hi", &choices(), &[])
            .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].content, "Classify: hi\nOptions: A, B");
    }

    #[test]
    fn numbered_rendering() {
        let m = tpl("{labels}", LabelRendering::Numbered).render_with("x", &choices(), &[]).unwrap();
        assert_eq!(m[0].content, "1. A\n2. B");
    }

    #[test]
    fn descriptions_rendering() {
        let m = tpl("{label_descriptions}", LabelRendering::Names).render_with("x", &choices(), &[]).unwrap();
        assert_eq!(m[0].content, "A: about A\nB: about B");
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let err = tpl("{text} {nope}", LabelRendering::Names).render_with("x", &choices(), &[]).unwrap_err();
        assert_eq!(err, TemplateError::Unresolved { template: "t".into(), name: "nope".into() });
    }

    #[test]
    fn braces_escape_and_pass_through() {
        let m = tpl("{{\"label\": \"{labels}\"}} {1} { }", LabelRendering::Names)
            .render_with("x", &choices(), &[])
            .unwrap();
        assert_eq!(m[0].content, "{\"label\": \"A, B\"} {1} { }");
    }

    #[test]
    fn extra_variables_and_system_prompt() {
        let t = PromptTemplate {
            id: "t".into(),
            system: "You code {area}.".into(),
            user: "{text}".into(),
            render_labels_as: LabelRendering::Names,
        };
        let m = t.render_with("doc", &choices(), &[("area", "Health")]).unwrap();
        assert_eq!(m[0], ChatMessage::system("You code Health."));
        assert_eq!(m[1], ChatMessage::user("doc"));
    }

    #[test]
    fn empty_text_renders() {
        let m = tpl("Classify: {text}", LabelRendering::Names).render_with("", &choices(), &[]).unwrap();
        assert_eq!(m[0].content, "Classify: ");
    }

    #[test]
    fn builtins_parse() {
        for id in ["zero_shot", "zero_shot_multi", "direct", "iterative_area", "iterative_final", "finetune"] {
            let t = builtin::by_id(id).unwrap_or_else(|| panic!("{id}"));
            t.render_with("x", &choices(), &[("area", "A"), ("max_labels", "3")]).unwrap();
        }
    }
}
