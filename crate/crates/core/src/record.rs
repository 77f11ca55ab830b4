//! Domain records and their line-delimited JSON files.
//!
//! Every file holds one JSON object per line with snake_case keys in
//! declaration order, so writing a loaded file reproduces it byte for byte.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{precondition, validation, Error, Result};

/// Weights smaller than this are written as exactly zero.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a normalized weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackCategory {
    Coverage,
    Accuracy,
    Coherence,
    #[default]
    Other,
}

impl std::str::FromStr for FeedbackCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coverage" => Ok(Self::Coverage),
            "accuracy" => Ok(Self::Accuracy),
            "coherence" => Ok(Self::Coherence),
            "other" => Ok(Self::Other),
            other => Err(validation(format!("unknown feedback category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub output_a: String,
    pub output_b: String,
    pub preferred: Preference,
}

/// One context `c` (title + post) with its initial output `x0`, language
/// feedback `f`, and optional gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub title: String,
    pub post: String,
    pub initial_output: String,
    pub feedback: String,
    #[serde(default)]
    pub feedback_category: FeedbackCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ideal_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl Sample {
    /// A context with no initial output or feedback yet.
    pub fn context(id: impl Into<String>, title: impl Into<String>, post: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            title: title.into(),
            post: post.into(),
            initial_output: String::new(),
            feedback: String::new(),
            feedback_category: FeedbackCategory::Other,
            ideal_output: None,
            comparison: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(validation("sample id must be non-empty"));
        }
        Ok(())
    }

    /// Stricter check applied before the sample is sent for refinement.
    pub fn validate_for_refinement(&self) -> Result<()> {
        self.validate()?;
        if self.feedback.trim().is_empty() {
            return Err(validation(format!(
                "sample `{}` has no feedback to refine with",
                self.id
            )));
        }
        Ok(())
    }
}

/// `N` candidate refinements of one sample. `scores`, `weights` and
/// `selected_index` are filled in by selection and omitted from the file
/// until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSet {
    pub sample_id: String,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty", serialize_with = "serialize_weights")]
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_index: Option<usize>,
}

fn serialize_weights<S: Serializer>(weights: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
    serializer.collect_seq(weights.iter().map(|&w| if w.abs() < WEIGHT_FLOOR { 0.0 } else { w }))
}

impl RefinementSet {
    pub fn unscored(sample_id: impl Into<String>, candidates: Vec<String>) -> Self {
        RefinementSet {
            sample_id: sample_id.into(),
            candidates,
            scores: Vec::new(),
            weights: Vec::new(),
            selected_index: None,
        }
    }

    pub fn is_selected(&self) -> bool {
        self.selected_index.is_some()
    }

    pub fn selected(&self) -> Option<&str> {
        self.selected_index
            .and_then(|i| self.candidates.get(i))
            .map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if n == 0 {
            return Err(validation(format!(
                "refinement set `{}` has no candidates",
                self.sample_id
            )));
        }
        let Some(selected) = self.selected_index else {
            if !self.scores.is_empty() || !self.weights.is_empty() {
                return Err(validation(format!(
                    "refinement set `{}` has scores but no selection",
                    self.sample_id
                )));
            }
            return Ok(());
        };
        if self.scores.len() != n || self.weights.len() != n {
            return Err(validation(format!(
                "refinement set `{}`: {} candidates, {} scores, {} weights",
                self.sample_id,
                n,
                self.scores.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(validation(format!(
                "refinement set `{}` has a weight outside [0, 1]",
                self.sample_id
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE + n as f64 * WEIGHT_FLOOR {
            return Err(validation(format!(
                "refinement set `{}` weights sum to {sum}",
                self.sample_id
            )));
        }
        let best = crate::select::select_best(&self.scores)?;
        if selected != best {
            return Err(validation(format!(
                "refinement set `{}` selects {selected} but the best score is at {best}",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// A `(prompt, completion, weight)` triple for supervised finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub prompt: String,
    pub completion: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl FinetuneRecord {
    pub fn new(prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        FinetuneRecord {
            prompt: prompt.into(),
            completion: completion.into(),
            weight: 1.0,
        }
    }

    pub fn weighted(prompt: impl Into<String>, completion: impl Into<String>, weight: f64) -> Self {
        FinetuneRecord {
            weight,
            ..FinetuneRecord::new(prompt, completion)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.completion.is_empty() {
            return Err(validation("finetune record needs a prompt and a completion"));
        }
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(validation(format!(
                "finetune record weight {} is outside (0, 1]",
                self.weight
            )));
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl_from(BufReader::new(file), path)
}

pub fn read_jsonl_from<T: DeserializeOwned>(reader: impl BufRead, origin: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).map_err(|e| validation(format!("cannot serialize record: {e}")))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes `records` through a temporary file in the same directory, so
/// readers never observe a half-written file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    validate_samples(&samples)?;
    Ok(samples)
}

pub fn validate_samples(samples: &[Sample]) -> Result<()> {
    let mut seen = HashSet::new();
    for sample in samples {
        sample.validate()?;
        if !seen.insert(sample.id.as_str()) {
            return Err(validation(format!("duplicate sample id `{}`", sample.id)));
        }
    }
    Ok(())
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    validate_samples(samples)?;
    write_jsonl(path, samples)
}

pub fn write_finetune_dataset(records: &[FinetuneRecord], path: &Path) -> Result<()> {
    for record in records {
        record.validate()?;
    }
    write_jsonl(path, records)
}

pub fn load_finetune_dataset(path: &Path) -> Result<Vec<FinetuneRecord>> {
    let records: Vec<FinetuneRecord> = read_jsonl(path)?;
    for (i, record) in records.iter().enumerate() {
        record.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}

pub fn load_refinements(path: &Path) -> Result<Vec<RefinementSet>> {
    let sets: Vec<RefinementSet> = read_jsonl(path)?;
    for set in &sets {
        set.validate()?;
    }
    Ok(sets)
}

pub fn write_refinements(path: &Path, sets: &[RefinementSet]) -> Result<()> {
    for set in sets {
        set.validate()?;
    }
    write_jsonl(path, sets)
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
pub fn partition<T: Clone>(items: &[T], parts: usize) -> Result<Vec<Vec<T>>> {
    if parts == 0 || items.len() < parts {
        return Err(precondition(format!(
            "cannot split {} item(s) into {parts} non-empty part(s)",
            items.len()
        )));
    }
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};

    fn sample(id: &str) -> Sample {
        Sample {
            feedback: "Mention the dog.".into(),
            initial_output: "A person has a pet.".into(),
            ..Sample::context(id, "My dog", "I have a dog. It is old.")
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_samples(&path).unwrap().is_empty());
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let mut b = sample("b");
        b.feedback_category = FeedbackCategory::Coverage;
        b.ideal_output = Some("Old dog.".into());
        b.comparison = Some(Comparison {
            output_a: "x.".into(),
            output_b: "y.".into(),
            preferred: Preference::B,
        });
        let samples = vec![sample("a"), b];
        write_samples(&path, &samples).unwrap();
        assert_eq!(load_samples(&path).unwrap(), samples);
    }

    #[test]
    fn missing_feedback_is_parse_error_at_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let good = serde_json::to_string(&sample("a")).unwrap();
        let bad = r#"{"id":"b","title":"t","post":"p","initial_output":"x"}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_samples(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("feedback"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let line = serde_json::to_string(&sample("a")).unwrap();
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_samples(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let line =
            r#"{"id":"a","title":"t","post":"p","initial_output":"x","feedback":"f","subreddit":"r/dogs","extra":1}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        let samples = load_samples(&path).unwrap();
        assert_eq!(samples[0].feedback_category, FeedbackCategory::Other);
    }

    #[test]
    fn empty_dataset_is_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finetune.jsonl");
        write_finetune_dataset(&[], &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 0);
    }

    #[test]
    fn single_record_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finetune.jsonl");
        write_finetune_dataset(&[FinetuneRecord::new("P", "C.")], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"prompt\":\"P\",\"completion\":\"C.\",\"weight\":1.0}\n");
    }

    fn random_text(rng: &mut impl RngCore) -> String {
        const ALPHABET: &[char] = &['a', 'Z', ' ', '\n', '"', '\\', 'é', '🙂', '.', '{'];
        let len = rng.random_range(1..40);
        (0..len)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
            .collect()
    }

    #[test]
    fn hundred_random_records_round_trip_byte_identically() {
        let mut rng = crate::rng::stream(11, "test-records", &[]);
        let records: Vec<FinetuneRecord> = (0..100)
            .map(|_| {
                FinetuneRecord::weighted(
                    random_text(&mut rng),
                    random_text(&mut rng),
                    rng.random_range(1e-9..=1.0),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("finetune.jsonl");
        write_finetune_dataset(&records, &path).unwrap();
        let loaded = load_finetune_dataset(&path).unwrap();
        assert_eq!(loaded.len(), records.len());
        for (a, b) in loaded.iter().zip(&records) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.completion, b.completion);
            assert_eq!(a.weight.to_bits(), b.weight.to_bits());
        }
        let again = dir.path().join("again.jsonl");
        write_finetune_dataset(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn tiny_weights_written_as_zero() {
        let set = RefinementSet {
            sample_id: "s".into(),
            candidates: vec!["a.".into(), "b.".into()],
            scores: vec![0.0, 1.0],
            weights: vec![1e-15, 1.0 - 1e-15],
            selected_index: Some(1),
        };
        let line = serde_json::to_string(&set).unwrap();
        assert!(line.contains("\"weights\":[0.0,"), "{line}");
    }

    #[test]
    fn unscored_set_omits_selection_fields() {
        let set = RefinementSet::unscored("s", vec!["a.".into()]);
        let line = serde_json::to_string(&set).unwrap();
        assert_eq!(line, r#"{"sample_id":"s","candidates":["a."]}"#);
        set.validate().unwrap();
    }

    #[test]
    fn selection_must_be_argmax() {
        let set = RefinementSet {
            sample_id: "s".into(),
            candidates: vec!["a.".into(), "b.".into()],
            scores: vec![0.1, 0.9],
            weights: vec![1.0, 0.0],
            selected_index: Some(0),
        };
        assert!(set.validate().is_err());
    }

    #[test]
    fn record_weight_bounds() {
        assert!(FinetuneRecord::weighted("p", "c", 0.0).validate().is_err());
        assert!(FinetuneRecord::weighted("p", "c", 1.5).validate().is_err());
        assert!(FinetuneRecord::new("", "c").validate().is_err());
        FinetuneRecord::weighted("p", "c", 0.25).validate().unwrap();
    }

    #[test]
    fn partition_sizes() {
        let parts = partition(&[1, 2, 3, 4, 5], 2).unwrap();
        assert_eq!(parts, vec![vec![1, 2, 3], vec![4, 5]]);
        assert!(partition(&[1], 2).is_err());
    }
}
