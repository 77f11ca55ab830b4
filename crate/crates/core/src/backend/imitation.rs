use std::collections::HashMap;
use std::sync::Arc;

use super::{BackendKind, LanguageModel, Policy, PolicyHandle};
use crate::config::SamplingParams;
use crate::error::Result;
use crate::record::{to_jsonl, FinetuneRecord};
use crate::rng::sha256_hex;

/// Result of imitation finetuning: answers each training prompt with its
/// training completion and defers everything else to `fallback`.
///
/// When a prompt occurs in several records the highest weight wins, the
/// earliest record among equals. The fallback is the base policy after
/// [`LanguageModel::adapt`] on the same records, or the base itself.
pub struct ImitationPolicy {
    handle: PolicyHandle,
    table: HashMap<String, (String, f64)>,
    fallback: Policy,
}

impl ImitationPolicy {
    pub fn train(base: Policy, records: &[FinetuneRecord]) -> Self {
        let mut table: HashMap<String, (String, f64)> = HashMap::new();
        for r in records {
            match table.get(&r.prompt) {
                Some((_, w)) if *w >= r.weight => {}
                _ => {
                    table.insert(r.prompt.clone(), (r.completion.clone(), r.weight));
                }
            }
        }
        let digest = sha256_hex(
            &[
                base.handle().model_id.as_bytes(),
                b"\n",
                &to_jsonl(records).unwrap_or_default(),
            ]
            .concat(),
        );
        let handle = PolicyHandle::new(BackendKind::Imitation, format!("imitation-{}", &digest[..12]));
        let fallback = base.adapt(records).unwrap_or(base);
        ImitationPolicy {
            handle,
            table,
            fallback,
        }
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        self.table.get(prompt).map(|(c, _)| c.as_str())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn fallback(&self) -> &Policy {
        &self.fallback
    }
}

impl LanguageModel for ImitationPolicy {
    fn handle(&self) -> &PolicyHandle {
        &self.handle
    }

    fn generate(&self, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>> {
        match self.lookup(prompt) {
            Some(c) => Ok(vec![c.to_string(); n]),
            None => self.fallback.generate(prompt, params, n),
        }
    }

    fn label_logprob(&self, prompt: &str, label: &str) -> Result<Option<f64>> {
        self.fallback.label_logprob(prompt, label)
    }

    /// Zero for the memorised completion (compared after trimming), otherwise
    /// whatever the fallback assigns.
    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> Result<f64> {
        match self.lookup(prefix) {
            Some(c) if c.trim() == continuation.trim() => Ok(0.0),
            _ => self.fallback.sequence_logprob(prefix, continuation),
        }
    }

    fn bos_cue(&self) -> &str {
        self.fallback.bos_cue()
    }

    /// Keeps the lookup table and adapts only the fallback, so that stacking
    /// [`ImitationPolicy::train`] on top of an imitation policy stays finite.
    fn adapt(&self, records: &[FinetuneRecord]) -> Option<Policy> {
        let fallback = self.fallback.adapt(records)?;
        Some(Arc::new(ImitationPolicy {
            handle: self.handle.clone(),
            table: self.table.clone(),
            fallback,
        }))
    }
}
