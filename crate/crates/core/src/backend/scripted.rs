//! Replay of recorded completions and log-probabilities.
//!
//! A fixtures directory holds `*.json` files (one fixture each) and/or
//! `*.jsonl` files (one fixture per line). Fixtures are keyed by the SHA-256
//! of their prompt.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendKind, LanguageModel, PolicyHandle};
use crate::config::SamplingParams;
use crate::error::{validation, Error, Result};
use crate::record::read_jsonl;
use crate::rng::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    /// Hex SHA-256 of `prompt`; filled in when omitted.
    #[serde(default)]
    pub prompt_hash: String,
    pub prompt: String,
    #[serde(default)]
    pub completions: Vec<String>,
    /// Per-token log-probabilities of each completion, aligned with `completions`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_logprobs: Vec<Vec<f64>>,
    /// Log-probability of each answer label after the prompt; `null` means
    /// the label has zero probability.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_logprobs: BTreeMap<String, Option<f64>>,
}

impl Fixture {
    pub fn new(prompt: impl Into<String>) -> Self {
        let prompt = prompt.into();
        Fixture {
            prompt_hash: sha256_hex(prompt.as_bytes()),
            prompt,
            completions: Vec::new(),
            token_logprobs: Vec::new(),
            label_logprobs: BTreeMap::new(),
        }
    }

    pub fn with_completion(mut self, text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        self.completions.push(text.into());
        self.token_logprobs.push(token_logprobs);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>, logprob: Option<f64>) -> Self {
        self.label_logprobs.insert(label.into(), logprob);
        self
    }

    fn validate(&mut self) -> Result<()> {
        let hash = sha256_hex(self.prompt.as_bytes());
        if self.prompt_hash.is_empty() {
            self.prompt_hash = hash;
        } else if self.prompt_hash != hash {
            return Err(validation(format!(
                "fixture prompt_hash {} does not match its prompt",
                self.prompt_hash
            )));
        }
        if !self.token_logprobs.is_empty() && self.token_logprobs.len() != self.completions.len() {
            return Err(validation("token_logprobs must align with completions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    handle: PolicyHandle,
    fixtures: HashMap<String, Fixture>,
}

impl ScriptedBackend {
    pub fn new(fixtures: impl IntoIterator<Item = Fixture>) -> Result<Self> {
        let mut map = HashMap::new();
        for mut f in fixtures {
            f.validate()?;
            if map.insert(f.prompt_hash.clone(), f).is_some() {
                return Err(validation("two fixtures share a prompt"));
            }
        }
        Ok(ScriptedBackend {
            handle: PolicyHandle::new(BackendKind::Scripted, "scripted"),
            fixtures: map,
        })
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        let mut fixtures = Vec::new();
        for path in entries {
            match path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => fixtures.extend(read_jsonl::<Fixture>(&path)?),
                Some("json") => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let fixture = serde_json::from_str(&text).map_err(|e| Error::Parse {
                        path: path.clone(),
                        line: e.line(),
                        message: e.to_string(),
                    })?;
                    fixtures.push(fixture);
                }
                _ => {}
            }
        }
        let mut backend = Self::new(fixtures)?;
        backend.handle.model_id = format!("scripted:{}", dir.display());
        Ok(backend)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    fn lookup(&self, prompt: &str) -> Result<&Fixture> {
        let hash = sha256_hex(prompt.as_bytes());
        self.fixtures.get(&hash).ok_or(Error::FixtureMiss { prompt_hash: hash })
    }
}

impl LanguageModel for ScriptedBackend {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    /// Cycles through the recorded completions.
    fn generate(&self, prompt: &str, _params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        let fixture = self.lookup(prompt)?;
        if fixture.completions.is_empty() {
            return Err(Error::Capability {
                model: self.handle.model_id.clone(),
                capability: "generation (fixture has no completions)".into(),
            });
        }
        Ok(fixture.completions.iter().cycle().take(n).cloned().collect())
    }

    fn label_logprob(&self, prompt: &str, label: &str) -> Result<Option<f64>> {
        let fixture = self.lookup(prompt)?;
        match fixture.label_logprobs.get(label) {
            Some(lp) => Ok(*lp),
            None if fixture.label_logprobs.is_empty() => Err(Error::Capability {
                model: self.handle.model_id.clone(),
                capability: "label log-probabilities".into(),
            }),
            None => Ok(None),
        }
    }

    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> Result<f64> {
        let fixture = self.lookup(prefix)?;
        let i = fixture
            .completions
            .iter()
            .position(|c| c == continuation)
            .ok_or_else(|| Error::FixtureMiss {
                prompt_hash: sha256_hex(format!("{prefix}\u{0}{continuation}").as_bytes()),
            })?;
        let tokens = fixture.token_logprobs.get(i).ok_or_else(|| Error::Capability {
            model: self.handle.model_id.clone(),
            capability: "token log-probabilities".into(),
        })?;
        Ok(tokens.iter().sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{generate, label_probability, sequence_logprob, LabelProbe};

    #[test]
    fn replays_and_cycles() {
        let backend = ScriptedBackend::new([Fixture::new("P").with_completion("abc", vec![-1.0])]).unwrap();
        let params = SamplingParams::default();
        assert_eq!(generate(&backend, "P", &params, 2).unwrap(), vec!["abc", "abc"]);
        assert!(matches!(
            generate(&backend, "Q", &params, 1),
            Err(Error::FixtureMiss { .. })
        ));
    }

    #[test]
    fn sums_token_logprobs() {
        let backend = ScriptedBackend::new([Fixture::new("P").with_completion(" x y", vec![-1.0, -2.0])]).unwrap();
        assert_eq!(sequence_logprob(&backend, "P", " x y").unwrap(), -3.0);
    }

    #[test]
    fn label_probes() {
        let fixture = Fixture::new("Q")
            .with_label(" Yes", Some(0.3f64.ln()))
            .with_label(" No", Some(0.1f64.ln()));
        let backend = ScriptedBackend::new([fixture]).unwrap();
        let p = label_probability(&backend, &LabelProbe::yes_no("Q")).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
        let swapped = label_probability(&backend, &LabelProbe::yes_no("Q").swapped()).unwrap();
        assert!((p + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_mismatch_rejected() {
        let mut f = Fixture::new("P");
        f.prompt_hash = "00".into();
        assert!(ScriptedBackend::new([f]).is_err());
    }

    #[test]
    fn loads_directory() {
        let dir = tempfile::tempdir().unwrap();
        let a = Fixture::new("A").with_completion("a.", vec![-0.5]);
        let b = Fixture::new("B").with_completion("b.", vec![-0.25]);
        fs::write(dir.path().join("a.json"), serde_json::to_string(&a).unwrap()).unwrap();
        crate::record::write_jsonl(&dir.path().join("more.jsonl"), &[b]).unwrap();
        fs::write(dir.path().join("README"), "ignored").unwrap();
        let backend = ScriptedBackend::from_dir(dir.path()).unwrap();
        assert_eq!(backend.len(), 2);
        assert_eq!(backend.sequence_logprob("B", "b.").unwrap(), -0.25);
    }
}
