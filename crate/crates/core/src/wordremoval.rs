//! Targeted word removal: a synthetic refinement task with an exact oracle.
//!
//! Sentences have the shape
//! `You are such a w1, and a w2, ..., and a wk, and a nice person.`
//! and a task asks for `l` of the `k` words to be removed. The oracle drops the
//! noun phrases headed by those words and joins the survivors with a plain
//! `" and "`, so `You are such a jerk, and a nice person, and an idiot.` with
//! `jerk` removed becomes `You are such a nice person and an idiot.`. The
//! model is prompted with the first two words of the sentence (the stem) and
//! must produce the rest.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::backend::{self, LanguageModel};
use crate::config::SamplingParams;
use crate::error::{precondition, validation, Result};
use crate::parallel::ordered_try_map;
use crate::refine::{postprocess, stem_of, PromptValues, TemplateName, TemplateSet};
use crate::rng;

pub const MAX_OFFENSIVE_WORDS: usize = 10;
pub const REMOVAL_COUNTS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_SENTENCES_PER_K: usize = 50;

const OPENING: &str = "You are such";
const ANCHOR: &str = "nice person";
const PROMPT_HEAD: &str = "In this text, many toxic and offensive words are used: ";
const PROMPT_MIDDLE: &str = " The ideal text should remove ";
const PROMPT_TAIL: &str = ", but otherwise be unchanged: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalTask {
    pub id: String,
    pub sentence: String,
    pub k: usize,
    pub remove_words: Vec<String>,
    /// Oracle completion that follows `stem`, including its leading space.
    pub target: String,
    pub stem: String,
}

impl RemovalTask {
    /// Builds a task from a sentence, computing stem and target with the oracle.
    pub fn from_sentence(id: impl Into<String>, sentence: &str, remove_words: Vec<String>) -> Result<Self> {
        let items = parse_items(sentence)?;
        let k = items.iter().filter(|i| head_word(i) != "person").count();
        let target = oracle_completion(sentence, &remove_words)?;
        Ok(RemovalTask {
            id: id.into(),
            sentence: sentence.to_string(),
            k,
            remove_words,
            target,
            stem: stem_of(sentence),
        })
    }

    pub fn full_target(&self) -> String {
        format!("{}{}", self.stem, self.target)
    }
}

/// `badword01` .. `badword25`.
pub fn default_word_list() -> Vec<String> {
    (1..=25).map(|i| format!("badword{i:02}")).collect()
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn compose_sentence(words: &[String]) -> String {
    let items: Vec<String> = words
        .iter()
        .map(|w| format!("{} {w}", article(w)))
        .chain(std::iter::once(format!("a {ANCHOR}")))
        .collect();
    format!("{OPENING} {}.", items.join(", and "))
}

/// Noun-phrase items of a sentence in the fixed grammar.
fn parse_items(sentence: &str) -> Result<Vec<&str>> {
    let body = sentence
        .strip_prefix(OPENING)
        .and_then(|s| s.strip_prefix(' '))
        .and_then(|s| s.strip_suffix('.'))
        .ok_or_else(|| validation(format!("sentence does not follow the task grammar: `{sentence}`")))?;
    Ok(body.split(", and ").collect())
}

fn head_word(item: &str) -> &str {
    item.rsplit(' ').next().unwrap_or(item)
}

/// The completion after the stem once every phrase headed by a word in
/// `remove_words` is deleted. Each removed word must head exactly one phrase.
pub fn oracle_completion(sentence: &str, remove_words: &[String]) -> Result<String> {
    let items = parse_items(sentence)?;
    for word in remove_words {
        let hits = items.iter().filter(|i| head_word(i) == word).count();
        if hits != 1 {
            return Err(validation(format!(
                "word `{word}` heads {hits} phrase(s) in `{sentence}`, expected exactly one"
            )));
        }
    }
    let kept: Vec<&str> = items
        .into_iter()
        .filter(|i| !remove_words.iter().any(|w| w == head_word(i)))
        .collect();
    let full = format!("{OPENING} {}.", kept.join(" and "));
    let stem = stem_of(sentence);
    Ok(full[stem.len()..].to_string())
}

/// `"the word a"`, `"the words a and b"`, `"the words a, b, and c"`.
pub fn removal_list(words: &[String]) -> String {
    match words {
        [] => String::new(),
        [one] => format!("the word {one}"),
        [a, b] => format!("the words {a} and {b}"),
        [init @ .., last] => format!("the words {}, and {last}", init.join(", ")),
    }
}

/// The feedback sentence asking for the words to be removed.
pub fn removal_instruction(words: &[String]) -> String {
    format!("remove {}", removal_list(words))
}

pub fn build_removal_prompt(task: &RemovalTask, templates: &TemplateSet) -> Result<String> {
    let values = PromptValues::new()
        .with("text", &task.sentence)
        .with("feedback", removal_instruction(&task.remove_words))
        .with("stem", &task.stem);
    templates.render(TemplateName::WordRemoval, &values)
}

/// A removal prompt decomposed back into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRemovalPrompt {
    pub sentence: String,
    pub remove_words: Vec<String>,
    pub stem: String,
}

/// Recognizes prompts rendered from the built-in word-removal template.
pub fn parse_removal_prompt(prompt: &str) -> Option<ParsedRemovalPrompt> {
    let rest = prompt.strip_prefix(PROMPT_HEAD)?;
    let (sentence, rest) = rest.split_once(PROMPT_MIDDLE)?;
    let (list, stem) = rest.rsplit_once(PROMPT_TAIL)?;
    let remove_words = if let Some(one) = list.strip_prefix("the word ") {
        vec![one.to_string()]
    } else {
        let many = list.strip_prefix("the words ")?;
        let (init, last) = many.rsplit_once(" and ")?;
        let init = init.strip_suffix(',').unwrap_or(init);
        init.split(", ")
            .chain(std::iter::once(last))
            .map(str::to_string)
            .collect()
    };
    Some(ParsedRemovalPrompt {
        sentence: sentence.to_string(),
        remove_words,
        stem: stem.to_string(),
    })
}

/// For each `k` in `1..=10`, draws `sentences_per_k` sentences of `k` distinct
/// words, then emits one task per `l` in `{1, 2, 3}` with `l <= k`.
pub fn generate_task_set(seed: u64, word_list: &[String], sentences_per_k: usize) -> Result<Vec<RemovalTask>> {
    let distinct: HashSet<&str> = word_list.iter().map(String::as_str).collect();
    if distinct.len() != word_list.len() {
        return Err(validation("word list contains duplicates"));
    }
    if word_list.len() < MAX_OFFENSIVE_WORDS {
        return Err(precondition(format!(
            "word list needs at least {MAX_OFFENSIVE_WORDS} words, got {}",
            word_list.len()
        )));
    }
    for w in word_list {
        if w.is_empty() || w.contains(|c: char| !c.is_alphanumeric()) || w == "person" {
            return Err(validation(format!("`{w}` is not a usable single word")));
        }
    }
    let mut rng = rng::stream(seed, "wordgen", &[]);
    let mut tasks = Vec::with_capacity(sentences_per_k * 27);
    for k in 1..=MAX_OFFENSIVE_WORDS {
        for s in 0..sentences_per_k {
            let words: Vec<String> = index::sample(&mut rng, word_list.len(), k)
                .into_iter()
                .map(|i| word_list[i].clone())
                .collect();
            let sentence = compose_sentence(&words);
            for l in REMOVAL_COUNTS.into_iter().filter(|&l| l <= k) {
                let mut picks: Vec<usize> = index::sample(&mut rng, k, l).into_vec();
                picks.sort_unstable();
                let remove = picks.iter().map(|&i| words[i].clone()).collect();
                tasks.push(RemovalTask::from_sentence(
                    format!("k{k:02}-s{s:03}-l{l}"),
                    &sentence,
                    remove,
                )?);
            }
        }
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchBreakdown {
    pub l: usize,
    pub n: usize,
    pub accuracy: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMatchReport {
    pub n: usize,
    /// Fraction of exact matches in `[0, 1]`.
    pub accuracy: f64,
    /// Binomial standard error `sqrt(p (1 - p) / n)`, as a fraction.
    pub se: f64,
    pub per_l: Vec<MatchBreakdown>,
    pub matches: Vec<bool>,
}

impl ExactMatchReport {
    pub fn percent(&self) -> (f64, f64) {
        (self.accuracy * 100.0, self.se * 100.0)
    }
}

pub fn is_exact_match(prediction: &str, task: &RemovalTask) -> bool {
    prediction.trim() == task.target.trim()
}

pub fn evaluate_exact_match(predictions: &[String], tasks: &[RemovalTask]) -> Result<ExactMatchReport> {
    if tasks.is_empty() {
        return Err(precondition("no tasks to evaluate"));
    }
    if predictions.len() != tasks.len() {
        return Err(precondition(format!(
            "{} prediction(s) for {} task(s)",
            predictions.len(),
            tasks.len()
        )));
    }
    let matches: Vec<bool> = predictions
        .iter()
        .zip(tasks)
        .map(|(p, t)| is_exact_match(p, t))
        .collect();
    let (accuracy, se) = crate::eval::proportion(matches.iter().filter(|&&m| m).count(), matches.len());
    let per_l = REMOVAL_COUNTS
        .into_iter()
        .filter_map(|l| {
            let hits: Vec<bool> = tasks
                .iter()
                .zip(&matches)
                .filter(|(t, _)| t.remove_words.len() == l)
                .map(|(_, &m)| m)
                .collect();
            (!hits.is_empty()).then(|| {
                let (accuracy, se) = crate::eval::proportion(hits.iter().filter(|&&m| m).count(), hits.len());
                MatchBreakdown {
                    l,
                    n: hits.len(),
                    accuracy,
                    se,
                }
            })
        })
        .collect();
    Ok(ExactMatchReport {
        n: tasks.len(),
        accuracy,
        se,
        per_l,
        matches,
    })
}

/// Greedy predictions of `policy` on every task, post-processed like sampled
/// refinements.
pub fn predict(
    policy: &dyn LanguageModel,
    tasks: &[RemovalTask],
    templates: &TemplateSet,
    params: &SamplingParams,
    parallelism: usize,
) -> Result<Vec<String>> {
    let (out, err) = ordered_try_map(tasks, parallelism, |_, task| {
        let prompt = build_removal_prompt(task, templates)?;
        let raw = backend::generate(policy, &prompt, params, 1)?;
        Ok::<_, crate::error::Error>(postprocess(&raw[0], params.max_tokens))
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Oracle predictions, one per task.
pub fn oracle_predictions(tasks: &[RemovalTask]) -> Vec<String> {
    tasks.iter().map(|t| t.target.clone()).collect()
}

/// Replaces exactly `round(rate * n)` predictions, chosen by a seeded shuffle,
/// with the unedited remainder of the sentence (never a match).
pub fn corrupt_predictions(predictions: &[String], tasks: &[RemovalTask], rate: f64, seed: u64) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(precondition(format!("corruption rate {rate} is outside [0, 1]")));
    }
    if predictions.len() != tasks.len() {
        return Err(precondition("predictions and tasks differ in length"));
    }
    let flips = (rate * tasks.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng::stream(seed, "corrupt", &[]));
    let mut out = predictions.to_vec();
    for &i in &order[..flips] {
        out[i] = tasks[i].sentence[tasks[i].stem.len()..].to_string();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub prediction: String,
    #[serde(rename = "match")]
    pub is_match: bool,
}

pub fn task_results(predictions: &[String], tasks: &[RemovalTask], report: &ExactMatchReport) -> Vec<TaskResult> {
    tasks
        .iter()
        .zip(predictions)
        .zip(&report.matches)
        .map(|((t, p), &m)| TaskResult {
            task_id: t.id.clone(),
            prediction: p.clone(),
            is_match: m,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "You are such a jerk, and a nice person, and an idiot.";

    #[test]
    fn worked_example_target() {
        let task = RemovalTask::from_sentence("ex", EXAMPLE, vec!["jerk".into()]).unwrap();
        assert_eq!(task.target, " such a nice person and an idiot.");
        assert_eq!(task.stem, "You are");
        assert_eq!(task.k, 2);
    }

    #[test]
    fn worked_example_prompt() {
        let task = RemovalTask::from_sentence("ex", EXAMPLE, vec!["jerk".into()]).unwrap();
        let prompt = build_removal_prompt(&task, &TemplateSet::default()).unwrap();
        assert_eq!(
            prompt,
            "In this text, many toxic and offensive words are used: You are such a jerk, and a nice person, \
             and an idiot. The ideal text should remove the word jerk, but otherwise be unchanged: You are"
        );
        let parsed = parse_removal_prompt(&prompt).unwrap();
        assert_eq!(parsed.sentence, EXAMPLE);
        assert_eq!(parsed.remove_words, vec!["jerk".to_string()]);
        assert_eq!(parsed.stem, "You are");
    }

    #[test]
    fn removal_lists() {
        let w = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(removal_list(&w(&["a"])), "the word a");
        assert_eq!(removal_list(&w(&["a", "b"])), "the words a and b");
        assert_eq!(removal_list(&w(&["a", "b", "c"])), "the words a, b, and c");
        for words in [w(&["x1"]), w(&["x1", "x2"]), w(&["x1", "x2", "x3"])] {
            let words_sentence = compose_sentence(&w(&["x1", "x2", "x3", "x4"]));
            let task = RemovalTask::from_sentence("t", &words_sentence, words.clone()).unwrap();
            let prompt = build_removal_prompt(&task, &TemplateSet::default()).unwrap();
            assert_eq!(parse_removal_prompt(&prompt).unwrap().remove_words, words);
        }
    }

    #[test]
    fn remove_all_words_keeps_anchor() {
        let words = vec!["badword01".to_string(), "badword02".to_string()];
        let sentence = compose_sentence(&words);
        assert_eq!(
            sentence,
            "You are such a badword01, and a badword02, and a nice person."
        );
        let task = RemovalTask::from_sentence("t", &sentence, words).unwrap();
        assert_eq!(task.target, " such a nice person.");
    }

    #[test]
    fn unknown_remove_word_is_rejected() {
        assert!(oracle_completion(EXAMPLE, &["moron".to_string()]).is_err());
    }

    #[test]
    fn default_counts() {
        let tasks = generate_task_set(0, &default_word_list(), DEFAULT_SENTENCES_PER_K).unwrap();
        assert_eq!(tasks.len(), 1350);
        let by_l = |l| tasks.iter().filter(|t| t.remove_words.len() == l).count();
        assert_eq!((by_l(1), by_l(2), by_l(3)), (500, 450, 400));
        assert_eq!(generate_task_set(0, &default_word_list(), 1).unwrap().len(), 27);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_task_set(7, &default_word_list(), 3).unwrap();
        let b = generate_task_set(7, &default_word_list(), 3).unwrap();
        let c = generate_task_set(8, &default_word_list(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn task_invariants() {
        for task in generate_task_set(3, &default_word_list(), 10).unwrap() {
            assert!((1..=10).contains(&task.k));
            assert!(task.remove_words.len() <= task.k);
            let tokens: Vec<&str> = task.sentence.split(|c: char| !c.is_alphanumeric()).collect();
            for w in &task.remove_words {
                assert_eq!(tokens.iter().filter(|t| *t == w).count(), 1, "{w} in {}", task.sentence);
                assert!(!task.target.split(|c: char| !c.is_alphanumeric()).any(|t| t == w));
            }
            assert!(task.target.contains("nice person"));
            assert_eq!(task.full_target(), format!("You are{}", task.target));
        }
    }

    #[test]
    fn word_list_validation() {
        let mut words = default_word_list();
        words[1] = words[0].clone();
        assert!(generate_task_set(0, &words, 1).is_err());
        assert!(generate_task_set(0, &default_word_list()[..9], 1).is_err());
    }

    #[test]
    fn oracle_scores_perfectly() {
        let tasks = generate_task_set(1, &default_word_list(), 5).unwrap();
        let report = evaluate_exact_match(&oracle_predictions(&tasks), &tasks).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.se, 0.0);
        assert_eq!(report.per_l.len(), 3);
    }

    #[test]
    fn trims_before_comparing() {
        let task = RemovalTask::from_sentence("ex", EXAMPLE, vec!["jerk".into()]).unwrap();
        assert!(is_exact_match("such a nice person and an idiot.  ", &task));
        assert!(!is_exact_match("such a nice person and an idiot", &task));
    }

    #[test]
    fn evaluation_preconditions() {
        assert!(evaluate_exact_match(&[], &[]).is_err());
        let tasks = generate_task_set(1, &default_word_list(), 1).unwrap();
        assert!(evaluate_exact_match(&["x".to_string()], &tasks).is_err());
    }

    #[test]
    fn corrupter_flips_exact_count() {
        let tasks = generate_task_set(2, &default_word_list(), 50).unwrap();
        let preds = corrupt_predictions(&oracle_predictions(&tasks), &tasks, 0.615, 9).unwrap();
        let report = evaluate_exact_match(&preds, &tasks).unwrap();
        assert_eq!(report.matches.iter().filter(|&&m| m).count(), 1350 - 830);
    }
}
