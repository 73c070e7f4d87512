use serde::{Deserialize, Serialize};

use super::{OracleError, Result};
use crate::corpus::LabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Classification,
    ClassificationWithHints,
    Saliency,
}

impl PromptRole {
    fn required(self) -> &'static [&'static str] {
        match self {
            PromptRole::Classification => &["text", "options"],
            PromptRole::ClassificationWithHints => &["text", "options", "hints"],
            PromptRole::Saliency => &["text", "label"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
    role: PromptRole,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, role: PromptRole) -> Result<Self> {
        let template = template.into();
        for name in role.required() {
            if !template.contains(&format!("{{{name}}}")) {
                return Err(OracleError::TemplateMismatch(format!(
                    "{role:?} template lacks {{{name}}}"
                )));
            }
        }
        Ok(Self { template, role })
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    /// Single-pass substitution so placeholder-like text inside values is left alone.
    fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.template.len() + 64);
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let replaced = after.find('}').and_then(|close| {
                let name = &after[..close];
                values.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
            });
            match replaced {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// The three prompts a run needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub classification: PromptTemplate,
    pub classification_with_hints: PromptTemplate,
    pub saliency: PromptTemplate,
}

impl PromptTemplates {
    pub const CLASSIFICATION: &'static str =
        "Question: Which category best describes the following text? Text: {text} Options: {options} Answer:";
    pub const CLASSIFICATION_WITH_HINTS: &'static str =
        "Question: Which category best describes the following text? Text: {text} Options: {options} Key words: {hints}. Answer:";
    pub const SALIENCY: &'static str = "Text: {text} Question: Which words indicate that the label is {label}? Answer:";

    pub fn new(classification: &str, with_hints: &str, saliency: &str) -> Result<Self> {
        Ok(Self {
            classification: PromptTemplate::new(classification, PromptRole::Classification)?,
            classification_with_hints: PromptTemplate::new(with_hints, PromptRole::ClassificationWithHints)?,
            saliency: PromptTemplate::new(saliency, PromptRole::Saliency)?,
        })
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::new(Self::CLASSIFICATION, Self::CLASSIFICATION_WITH_HINTS, Self::SALIENCY)
            .expect("default templates are well-formed")
    }
}

/// Orders hint words by their first case-insensitive occurrence in `text`;
/// words that do not occur keep their relative order at the end.
fn hints_in_document_order(text: &str, hints: &[String]) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut keyed: Vec<(usize, usize, &String)> = hints
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let pos = lower.find(&h.to_lowercase()).unwrap_or(usize::MAX);
            (pos, i, h)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, _, h)| h.clone()).collect()
}

pub fn build_class_prompt(
    template: &PromptTemplate,
    text: &str,
    labels: &LabelSet,
    hints: Option<&[String]>,
) -> Result<String> {
    let options = labels.names().join(", ");
    match (template.role(), hints) {
        (PromptRole::Classification, None) => Ok(template.render(&[("text", text), ("options", &options)])),
        (PromptRole::ClassificationWithHints, Some(hints)) => {
            let hints = hints_in_document_order(text, hints).join(", ");
            Ok(template.render(&[("text", text), ("options", &options), ("hints", &hints)]))
        }
        (role, hints) => Err(OracleError::TemplateMismatch(format!(
            "{role:?} template used with hints {}",
            if hints.is_some() { "present" } else { "absent" }
        ))),
    }
}

pub fn build_saliency_prompt(template: &PromptTemplate, text: &str, label: &str) -> Result<String> {
    if template.role() != PromptRole::Saliency {
        return Err(OracleError::TemplateMismatch(format!(
            "{:?} template used for a saliency query",
            template.role()
        )));
    }
    Ok(template.render(&[("text", text), ("label", label)]))
}

fn strip_punctuation(s: &str) -> &str {
    s.trim_matches(|c: char| !c.is_alphanumeric())
}

fn common_prefix_chars(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Maps free generated text to a label: exact match, then case-insensitive
/// match ignoring surrounding punctuation, then the unique label with the
/// longest common prefix (at least 3 characters, or the whole label if shorter).
pub fn map_answer_to_label(answer: &str, labels: &LabelSet) -> Result<usize> {
    let trimmed = answer.trim();
    if let Some(i) = labels.index_of(trimmed) {
        return Ok(i);
    }

    let cleaned = strip_punctuation(trimmed).to_lowercase();
    let unmappable = || OracleError::UnmappableAnswer(answer.to_owned());
    if cleaned.is_empty() {
        return Err(unmappable());
    }
    let ci: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.names()[i].to_lowercase() == cleaned)
        .collect();
    match ci.as_slice() {
        [only] => return Ok(*only),
        [] => {}
        _ => return Err(unmappable()),
    }

    let scored: Vec<(usize, usize)> = labels
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let name = name.to_lowercase();
            let prefix = common_prefix_chars(&cleaned, &name);
            let needed = name.chars().count().min(3);
            (i, if prefix >= needed { prefix } else { 0 })
        })
        .collect();
    let best = scored.iter().map(|&(_, s)| s).max().unwrap_or(0);
    let winners: Vec<usize> = scored.iter().filter(|&&(_, s)| s == best).map(|&(i, _)| i).collect();
    match winners.as_slice() {
        [only] if best > 0 => Ok(*only),
        _ => Err(unmappable()),
    }
}
