//! Refinement prompts, sampling of candidate refinements, and output cleanup.

mod template;

pub use template::{render_prompt, stem_of, PromptTemplate, PromptValues, TemplateName, TemplateSet, PLACEHOLDERS};

use crate::backend::{self, LanguageModel};
use crate::config::SamplingParams;
use crate::error::{precondition, Result};
use crate::record::{RefinementSet, Sample};
use crate::tokenize;

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 8] = ['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}', '\u{bb}'];

/// Cleans a raw sampled completion:
///
/// 1. strip leading characters that are not letters or digits,
/// 2. cut everything from the first line break on,
/// 3. keep at most `max_tokens` tokens,
/// 4. drop a trailing fragment that does not end a sentence.
///
/// A sentence ends at `.`, `!` or `?`, optionally followed by closing quotes
/// or brackets, when the next character is whitespace or the end of text.
/// Returns the empty string when no complete sentence survives.
pub fn postprocess(raw: &str, max_tokens: usize) -> String {
    let text = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
    let text = match text.find(['\n', '\r']) {
        Some(i) => &text[..i],
        None => text,
    };
    let text = tokenize::truncate_tokens(text.trim_end(), max_tokens);
    text[..complete_sentences_end(text)].trim_end().to_string()
}

/// Byte offset just past the last complete sentence in `text`.
fn complete_sentences_end(text: &str) -> usize {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut end = 0;
    let mut i = 0;
    while i < chars.len() {
        if TERMINATORS.contains(&chars[i].1) {
            let mut j = i + 1;
            while j < chars.len() && (TERMINATORS.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
                j += 1;
            }
            if j == chars.len() || chars[j].1.is_whitespace() {
                end = if j == chars.len() { text.len() } else { chars[j].0 };
            }
            i = j;
        } else {
            i += 1;
        }
    }
    end
}

/// True when `text` is empty or ends a sentence in the sense of [`postprocess`].
pub fn is_complete(text: &str) -> bool {
    text.is_empty() || complete_sentences_end(text) == text.len()
}

/// Samples `n` refinements of `sample` from `policy` using `template`, in
/// sampling order, each passed through [`postprocess`].
///
/// Candidates that clean up to nothing are kept as empty strings.
pub fn generate_refinements(
    policy: &dyn LanguageModel,
    template: &PromptTemplate,
    sample: &Sample,
    n: usize,
    params: &SamplingParams,
) -> Result<RefinementSet> {
    if n < 1 {
        return Err(precondition("n must be at least 1"));
    }
    if template.name().required_placeholders().contains(&"feedback") {
        sample.validate_for_refinement()?;
    }
    let prompt = render_prompt(template, sample)?;
    let raw = backend::generate(policy, &prompt, params, n)?;
    let candidates = raw.iter().map(|r| postprocess(r, params.max_tokens)).collect();
    Ok(RefinementSet::unscored(sample.id.clone(), candidates))
}
