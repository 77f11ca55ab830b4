//! Prompt templates shipped as text assets under `templates/`.
//!
//! A template body is plain text with `{name}` placeholders. Only the names in
//! [`PLACEHOLDERS`] are substituted; any other braces are kept verbatim, and
//! substituted values are never rescanned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Sample;

pub const PLACEHOLDERS: &[&str] = &[
    "title",
    "text",
    "summary",
    "feedback",
    "refinement",
    "stem",
    "summary_a",
    "summary_b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    InitialSummary,
    RefineWithFeedback,
    RefineWithoutFeedback,
    WordRemoval,
    Instructrm1,
    Instructrm2,
    Instructrm3,
    Instructrm4,
    Instructrm5,
    FinetuneSummaries,
    FinetuneFeedbackRefinement,
    FinetuneFeedbackRefinementCompletion,
    RmBinary,
    RmComparison,
}

impl TemplateName {
    pub const ALL: [TemplateName; 14] = [
        TemplateName::InitialSummary,
        TemplateName::RefineWithFeedback,
        TemplateName::RefineWithoutFeedback,
        TemplateName::WordRemoval,
        TemplateName::Instructrm1,
        TemplateName::Instructrm2,
        TemplateName::Instructrm3,
        TemplateName::Instructrm4,
        TemplateName::Instructrm5,
        TemplateName::FinetuneSummaries,
        TemplateName::FinetuneFeedbackRefinement,
        TemplateName::FinetuneFeedbackRefinementCompletion,
        TemplateName::RmBinary,
        TemplateName::RmComparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::InitialSummary => "initial_summary",
            TemplateName::RefineWithFeedback => "refine_with_feedback",
            TemplateName::RefineWithoutFeedback => "refine_without_feedback",
            TemplateName::WordRemoval => "word_removal",
            TemplateName::Instructrm1 => "instructrm_1",
            TemplateName::Instructrm2 => "instructrm_2",
            TemplateName::Instructrm3 => "instructrm_3",
            TemplateName::Instructrm4 => "instructrm_4",
            TemplateName::Instructrm5 => "instructrm_5",
            TemplateName::FinetuneSummaries => "finetune_summaries",
            TemplateName::FinetuneFeedbackRefinement => "finetune_feedback_refinement",
            TemplateName::FinetuneFeedbackRefinementCompletion => "finetune_feedback_refinement_completion",
            TemplateName::RmBinary => "rm_binary",
            TemplateName::RmComparison => "rm_comparison",
        }
    }

    /// InstructRM prompt by its 1-based index.
    pub fn instructrm(index: u8) -> Result<Self> {
        match index {
            1 => Ok(TemplateName::Instructrm1),
            2 => Ok(TemplateName::Instructrm2),
            3 => Ok(TemplateName::Instructrm3),
            4 => Ok(TemplateName::Instructrm4),
            5 => Ok(TemplateName::Instructrm5),
            _ => Err(Error::Precondition(format!(
                "InstructRM prompt index must be in 1..=5, got {index}"
            ))),
        }
    }

    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::InitialSummary | TemplateName::FinetuneSummaries => &["title", "text"],
            TemplateName::RefineWithFeedback => &["title", "text", "summary", "feedback"],
            TemplateName::RefineWithoutFeedback | TemplateName::FinetuneFeedbackRefinement | TemplateName::RmBinary => {
                &["title", "text", "summary"]
            }
            TemplateName::WordRemoval => &["text", "feedback", "stem"],
            TemplateName::Instructrm1
            | TemplateName::Instructrm2
            | TemplateName::Instructrm3
            | TemplateName::Instructrm4
            | TemplateName::Instructrm5 => &["title", "text", "summary", "feedback", "refinement"],
            TemplateName::FinetuneFeedbackRefinementCompletion => &["feedback", "refinement"],
            TemplateName::RmComparison => &["title", "text", "summary_a", "summary_b"],
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateName::InitialSummary => include_str!("../../templates/initial_summary.txt"),
            TemplateName::RefineWithFeedback => {
                include_str!("../../templates/refine_with_feedback.txt")
            }
            TemplateName::RefineWithoutFeedback => {
                include_str!("../../templates/refine_without_feedback.txt")
            }
            TemplateName::WordRemoval => include_str!("../../templates/word_removal.txt"),
            TemplateName::Instructrm1 => include_str!("../../templates/instructrm_1.txt"),
            TemplateName::Instructrm2 => include_str!("../../templates/instructrm_2.txt"),
            TemplateName::Instructrm3 => include_str!("../../templates/instructrm_3.txt"),
            TemplateName::Instructrm4 => include_str!("../../templates/instructrm_4.txt"),
            TemplateName::Instructrm5 => include_str!("../../templates/instructrm_5.txt"),
            TemplateName::FinetuneSummaries => {
                include_str!("../../templates/finetune_summaries.txt")
            }
            TemplateName::FinetuneFeedbackRefinement => {
                include_str!("../../templates/finetune_feedback_refinement.txt")
            }
            TemplateName::FinetuneFeedbackRefinementCompletion => {
                include_str!("../../templates/finetune_feedback_refinement_completion.txt")
            }
            TemplateName::RmBinary => include_str!("../../templates/rm_binary.txt"),
            TemplateName::RmComparison => include_str!("../../templates/rm_comparison.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown template `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    body: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let present = placeholders_in(&body);
        for required in name.required_placeholders() {
            if !present.contains(required) {
                return Err(Error::Config(format!(
                    "template `{name}` lacks required placeholder `{{{required}}}`"
                )));
            }
        }
        Ok(PromptTemplate { name, body })
    }

    pub fn builtin(name: TemplateName) -> Self {
        PromptTemplate {
            name,
            body: name.default_body().to_string(),
        }
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn render(&self, values: &PromptValues) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let Some(close) = after.find('}') else {
                out.push_str(&rest[open..]);
                return Ok(out);
            };
            let key = &after[..close];
            if PLACEHOLDERS.contains(&key) {
                match values.get(key) {
                    Some(v) if !v.trim().is_empty() => out.push_str(v),
                    _ => {
                        return Err(Error::Template {
                            template: self.name.to_string(),
                            placeholder: key.to_string(),
                        })
                    }
                }
                rest = &after[close + 1..];
            } else {
                out.push('{');
                rest = after;
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn placeholders_in(body: &str) -> Vec<&'static str> {
    PLACEHOLDERS
        .iter()
        .copied()
        .filter(|p| body.contains(&format!("{{{p}}}")))
        .collect()
}

/// Values for template placeholders.
#[derive(Debug, Clone, Default)]
pub struct PromptValues {
    values: BTreeMap<&'static str, String>,
}

impl PromptValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// `{title}`, `{text}`, `{summary}`, `{feedback}` and `{stem}` from a sample.
    pub fn from_sample(sample: &Sample) -> Self {
        PromptValues::new()
            .with("title", &sample.title)
            .with("text", &sample.post)
            .with("summary", &sample.initial_output)
            .with("feedback", &sample.feedback)
            .with("stem", stem_of(&sample.post))
    }

    /// Sets `key`; panics if `key` is not one of [`PLACEHOLDERS`].
    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        let key = PLACEHOLDERS
            .iter()
            .copied()
            .find(|p| *p == key)
            .unwrap_or_else(|| panic!("unknown placeholder `{key}`"));
        self.values.insert(key, value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// The first two whitespace-delimited words of `text`.
pub fn stem_of(text: &str) -> String {
    text.split_whitespace().take(2).collect::<Vec<_>>().join(" ")
}

/// Built-in templates, optionally overridden by `<name>.txt` files in a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: TemplateName::ALL
                .into_iter()
                .map(|n| (n, PromptTemplate::builtin(n)))
                .collect(),
        }
    }
}

impl TemplateSet {
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let mut set = TemplateSet::default();
        let Some(dir) = dir else {
            return Ok(set);
        };
        for name in TemplateName::ALL {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let body = body.strip_suffix('\n').unwrap_or(&body);
                set.templates.insert(name, PromptTemplate::new(name, body)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn render(&self, name: TemplateName, values: &PromptValues) -> Result<String> {
        self.get(name).render(values)
    }
}

/// Renders `template` with the values a [`Sample`] supplies.
pub fn render_prompt(template: &PromptTemplate, sample: &Sample) -> Result<String> {
    template.render(&PromptValues::from_sample(sample))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        Sample {
            initial_output: "My dog is old.".into(),
            feedback: "Say the dog is 15.".into(),
            ..Sample::context("s1", "Old dog", "My dog is 15 years old.")
        }
    }

    #[test]
    fn builtins_satisfy_their_own_contracts() {
        for name in TemplateName::ALL {
            PromptTemplate::new(name, name.default_body()).unwrap();
            assert!(!name.default_body().ends_with('\n'), "{name}");
        }
    }

    #[test]
    fn refine_with_feedback_layout() {
        let t = PromptTemplate::builtin(TemplateName::RefineWithFeedback);
        let out = render_prompt(&t, &sample()).unwrap();
        let fb = out.find("Feedback on Summary: Say the dog is 15.").unwrap();
        let cue = out.find("Improved TL;DR:").unwrap();
        assert!(fb < cue);
        assert!(out.ends_with("Improved TL;DR:"));
    }

    #[test]
    fn refine_without_feedback_drops_feedback_block() {
        let with = render_prompt(&PromptTemplate::builtin(TemplateName::RefineWithFeedback), &sample()).unwrap();
        let without = render_prompt(&PromptTemplate::builtin(TemplateName::RefineWithoutFeedback), &sample()).unwrap();
        assert!(!without.contains("Feedback"));
        assert!(without.starts_with("Write an excellent summary that is better than the given summary."));
        let strip = |s: &str| s.split("\n\n").skip(1).collect::<Vec<_>>().join("\n\n");
        assert_eq!(
            strip(&with).replace("\n\nFeedback on Summary: Say the dog is 15.", ""),
            strip(&without)
        );
    }

    #[test]
    fn empty_title_is_template_error() {
        let mut s = sample();
        s.title = String::new();
        let err = render_prompt(&PromptTemplate::builtin(TemplateName::InitialSummary), &s).unwrap_err();
        match err {
            Error::Template { placeholder, .. } => assert_eq!(placeholder, "title"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_braces_survive_and_values_are_not_rescanned() {
        let t = PromptTemplate::new(TemplateName::InitialSummary, "{x} {title} {text}").unwrap();
        let values = PromptValues::new().with("title", "{text}").with("text", "body");
        assert_eq!(t.render(&values).unwrap(), "{x} {text} body");
    }

    #[test]
    fn custom_template_must_keep_required_placeholders() {
        assert!(PromptTemplate::new(TemplateName::RefineWithFeedback, "{title} {text} {summary}").is_err());
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("initial_summary.txt"), "T={title} X={text} TL;DR:\n").unwrap();
        let set = TemplateSet::load(Some(dir.path())).unwrap();
        let out = set
            .render(TemplateName::InitialSummary, &PromptValues::from_sample(&sample()))
            .unwrap();
        assert_eq!(out, "T=Old dog X=My dog is 15 years old. TL;DR:");
        assert_eq!(
            set.get(TemplateName::RmBinary).body(),
            TemplateName::RmBinary.default_body()
        );
    }

    #[test]
    fn stem_is_first_two_words() {
        assert_eq!(stem_of("You are such a jerk."), "You are");
        assert_eq!(stem_of("  Hi"), "Hi");
    }
}
