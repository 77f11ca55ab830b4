//! Offline rule-based models.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::{BackendKind, LanguageModel, Policy, PolicyHandle};
use crate::config::SamplingParams;
use crate::error::{validation, Result};
use crate::record::FinetuneRecord;
use crate::rng;
use crate::tokenize::count_tokens;
use crate::wordremoval;

/// Log-probability charged per token of any continuation a point-mass mock
/// would not have produced.
const OFF_MODE_TOKEN_LOGPROB: f64 = -9.210340371976182; // ln 1e-4

/// Deterministic heuristic language model.
///
/// * Word-removal prompts are answered with the oracle, except that a seeded
///   `corruption` fraction of the vocabulary is "unknown": those words are
///   left in place. Training on demonstrations (see [`LanguageModel::adapt`])
///   teaches it the words the demonstrations remove.
/// * `TL;DR:` prompts are answered with a sentence of the post; refinement
///   prompts prefer the sentence sharing most words with the feedback.
/// * InstructRM, binary-RM and comparison-RM probes are answered from word
///   overlap between the fields of the prompt.
#[derive(Debug, Clone)]
pub struct RuleMock {
    handle: PolicyHandle,
    seed: u64,
    corruption: f64,
    learned: BTreeSet<String>,
}

impl RuleMock {
    pub fn new(seed: u64, corruption: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&corruption) {
            return Err(validation(format!("corruption {corruption} is outside [0, 1]")));
        }
        let model_id = if corruption > 0.0 {
            format!("rule-mock(corruption={corruption})")
        } else {
            "rule-mock".to_string()
        };
        Ok(RuleMock {
            handle: PolicyHandle::new(BackendKind::RuleMock, model_id),
            seed,
            corruption,
            learned: BTreeSet::new(),
        })
    }

    pub fn knows(&self, word: &str) -> bool {
        self.learned.contains(word)
            || rng::unit_hash(self.seed, "mock-vocabulary", &[word.as_bytes()]) >= self.corruption
    }

    pub fn learned_words(&self) -> impl Iterator<Item = &str> {
        self.learned.iter().map(String::as_str)
    }

    fn complete(&self, prompt: &str, params: &SamplingParams, draw: usize) -> String {
        if let Some(parsed) = wordremoval::parse_removal_prompt(prompt) {
            let known: Vec<String> = parsed.remove_words.iter().filter(|w| self.knows(w)).cloned().collect();
            return wordremoval::oracle_completion(&parsed.sentence, &known).unwrap_or_default();
        }
        if prompt.ends_with("TL;DR:") {
            let Some(post) = field(prompt, "Text: ") else {
                return String::new();
            };
            let sentences = split_sentences(post);
            if sentences.is_empty() {
                return String::new();
            }
            let mut rng = rng::stream(
                self.seed,
                "sampling",
                &[
                    prompt.as_bytes(),
                    &params.seed.to_le_bytes(),
                    &(draw as u64).to_le_bytes(),
                ],
            );
            let pick = match field(prompt, "Feedback on Summary: ") {
                Some(feedback) => {
                    let fb = content_words(feedback);
                    let overlap: Vec<usize> = sentences.iter().map(|s| overlap_count(&fb, s)).collect();
                    let best = *overlap.iter().max().unwrap_or(&0);
                    let top: Vec<usize> = (0..sentences.len()).filter(|&i| overlap[i] == best).collect();
                    top[rng.random_range(0..top.len())]
                }
                None => rng.random_range(0..sentences.len().min(3)),
            };
            return format!(" {}", sentences[pick]);
        }
        String::new()
    }

    fn probe_good_probability(&self, prompt: &str) -> Option<ProbeKind> {
        if let (Some(feedback), Some(new)) = (last_field(prompt, "Feedback: "), field(prompt, "New summary: ")) {
            let fb = content_words(feedback);
            let frac = if fb.is_empty() {
                0.0
            } else {
                overlap_count(&fb, new) as f64 / fb.len() as f64
            };
            return Some(ProbeKind::YesNo(0.1 + 0.8 * frac));
        }
        if prompt.contains("Question: Is the above an excellent summary") {
            let text = field(prompt, "Text: ")?;
            let summary = field(prompt, "TL;DR: ")?;
            return Some(ProbeKind::YesNo(0.1 + 0.8 * coverage(summary, text)));
        }
        if prompt.contains("Question: Which summary is the better one?") {
            let text = field(prompt, "Text: ")?;
            let a = coverage(field(prompt, "Summary A: ")?, text);
            let b = coverage(field(prompt, "Summary B: ")?, text);
            return Some(ProbeKind::AB(1.0 / (1.0 + (-4.0 * (a - b)).exp())));
        }
        None
    }
}

enum ProbeKind {
    YesNo(f64),
    AB(f64),
}

impl LanguageModel for RuleMock {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    fn generate(&self, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        Ok((0..n).map(|i| self.complete(prompt, params, i)).collect())
    }

    fn label_logprob(&self, prompt: &str, label: &str) -> Result<Option<f64>> {
        let p = match (self.probe_good_probability(prompt), label) {
            (Some(ProbeKind::YesNo(p)), " Yes" | " True") => p,
            (Some(ProbeKind::YesNo(p)), " No" | " False") => 1.0 - p,
            (Some(ProbeKind::AB(p)), " A") => p,
            (Some(ProbeKind::AB(p)), " B") => 1.0 - p,
            _ => return Ok(None),
        };
        Ok((p > 0.0).then(|| p.ln()))
    }

    /// Point mass on the first greedy completion; anything else pays a fixed
    /// per-token penalty.
    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> Result<f64> {
        let mode = self.complete(prefix, &SamplingParams::default(), 0);
        if mode.trim() == continuation.trim() {
            Ok(0.0)
        } else {
            Ok(OFF_MODE_TOKEN_LOGPROB * count_tokens(continuation).max(1) as f64)
        }
    }

    fn adapt(&self, records: &[FinetuneRecord]) -> Option<Policy> {
        let mut learned = self.learned.clone();
        for record in records {
            let Some(parsed) = wordremoval::parse_removal_prompt(&record.prompt) else {
                continue;
            };
            let tokens: HashSet<&str> = record.completion.split(|c: char| !c.is_alphanumeric()).collect();
            for word in parsed.remove_words {
                if !tokens.contains(word.as_str()) {
                    learned.insert(word);
                }
            }
        }
        if learned == self.learned {
            return None;
        }
        let mut next = self.clone();
        next.handle.model_id = format!(
            "{}+{}w",
            self.handle.model_id.split('+').next().unwrap_or(""),
            learned.len()
        );
        next.learned = learned;
        Some(Arc::new(next))
    }
}

/// Text after `label` up to the end of that line.
fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let start = prompt.find(label)? + label.len();
    let rest = &prompt[start..];
    Some(rest.split('\n').next().unwrap_or(rest).trim())
}

fn last_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let start = prompt.rfind(label)? + label.len();
    let rest = &prompt[start..];
    Some(rest.split('\n').next().unwrap_or(rest).trim())
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            let s = text[start..i + 1].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    out
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "to", "in", "is", "it", "that", "this", "for", "on", "with", "was", "be", "are",
    "i", "my", "me", "you", "he", "she", "they", "we", "but", "or", "as", "at", "by", "not", "should", "summary",
];

fn content_words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn overlap_count(words: &HashSet<String>, text: &str) -> usize {
    content_words(text).intersection(words).count()
}

/// Share of the summary's content words that also occur in the text.
fn coverage(summary: &str, text: &str) -> f64 {
    let s = content_words(summary);
    if s.is_empty() {
        return 0.0;
    }
    s.intersection(&content_words(text)).count() as f64 / s.len() as f64
}

/// Unconditional model emitting i.i.d. tokens separated by single spaces.
#[derive(Debug, Clone)]
pub struct CategoricalMock {
    handle: PolicyHandle,
    seed: u64,
    tokens: Vec<String>,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl CategoricalMock {
    pub fn new(seed: u64, tokens: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != probs.len() {
            return Err(validation("categorical mock needs one probability per token"));
        }
        if tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(validation(
                "categorical tokens must be non-empty and free of whitespace",
            ));
        }
        if tokens.iter().collect::<HashSet<_>>().len() != tokens.len() {
            return Err(validation("categorical tokens must be distinct"));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(validation(
                "categorical probabilities must be non-negative and sum to 1",
            ));
        }
        let sampler = WeightedIndex::new(&probs).map_err(|e| validation(e.to_string()))?;
        let model_id = format!(
            "categorical({})",
            tokens
                .iter()
                .zip(&probs)
                .map(|(t, p)| format!("{t}={p}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        Ok(CategoricalMock {
            handle: PolicyHandle::new(BackendKind::RuleMock, model_id),
            seed,
            tokens,
            probs,
            sampler,
        })
    }

    pub fn probability(&self, token: &str) -> f64 {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl LanguageModel for CategoricalMock {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    /// Ignores `top_p` and `temperature` so samples follow exactly the
    /// distribution that [`Self::sequence_logprob`] scores.
    fn generate(&self, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        Ok((0..n)
            .map(|i| {
                let mut rng = rng::stream(
                    self.seed,
                    "sampling",
                    &[prompt.as_bytes(), &params.seed.to_le_bytes(), &(i as u64).to_le_bytes()],
                );
                (0..params.max_tokens)
                    .map(|_| self.tokens[self.sampler.sample(&mut rng)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect())
    }

    fn label_logprob(&self, _prompt: &str, label: &str) -> Result<Option<f64>> {
        let p = self.probability(label.trim());
        Ok((p > 0.0).then(|| p.ln()))
    }

    fn sequence_logprob(&self, _prefix: &str, continuation: &str) -> Result<f64> {
        Ok(continuation.split_whitespace().map(|t| self.probability(t).ln()).sum())
    }
}

/// Emits the same text for every prompt, with probability one.
#[derive(Debug, Clone)]
pub struct ConstantMock {
    handle: PolicyHandle,
    text: String,
}

impl ConstantMock {
    pub fn new(text: String) -> Self {
        ConstantMock {
            handle: PolicyHandle::new(BackendKind::RuleMock, "constant"),
            text,
        }
    }
}

impl LanguageModel for ConstantMock {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    fn generate(&self, _prompt: &str, _params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        Ok(vec![self.text.clone(); n])
    }

    fn label_logprob(&self, _prompt: &str, label: &str) -> Result<Option<f64>> {
        Ok((label == self.text).then_some(0.0))
    }

    fn sequence_logprob(&self, _prefix: &str, continuation: &str) -> Result<f64> {
        Ok(if continuation == self.text {
            0.0
        } else {
            f64::NEG_INFINITY
        })
    }
}
