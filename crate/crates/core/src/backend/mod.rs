//! Language-model backends behind one interface: generation, label-probability
//! probes and sequence log-likelihood.
//!
//! * [`mock`]: offline rule-based models (word-removal oracle with seeded
//!   vocabulary gaps, i.i.d. categorical, constant).
//! * [`scripted`]: replays recorded fixtures.
//! * [`http`]: a completion endpoint with per-token logprobs.
//! * [`imitation`]: the policy produced by imitation finetuning.

pub mod http;
pub mod imitation;
pub mod mock;
pub mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{BackendSpec, SamplingParams};
use crate::error::{precondition, validation, Error, Result};
use crate::record::FinetuneRecord;

pub use http::HttpBackend;
pub use imitation::ImitationPolicy;
pub use mock::{CategoricalMock, ConstantMock, RuleMock};
pub use scripted::{Fixture, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RuleMock,
    Scripted,
    Http,
    Imitation,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::RuleMock => "rule_mock",
            BackendKind::Scripted => "scripted",
            BackendKind::Http => "http",
            BackendKind::Imitation => "imitation",
        })
    }
}

/// Identity of a policy, as recorded in run state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHandle {
    pub backend_kind: BackendKind,
    pub model_id: String,
    pub defaults: SamplingParams,
}

impl PolicyHandle {
    pub fn new(backend_kind: BackendKind, model_id: impl Into<String>) -> Self {
        PolicyHandle {
            backend_kind,
            model_id: model_id.into(),
            defaults: SamplingParams::default(),
        }
    }
}

/// Asks for `p(good) / (p(good) + p(bad))` of the two answer labels after `prompt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelProbe {
    pub prompt: String,
    pub good_label: String,
    pub bad_label: String,
}

impl LabelProbe {
    pub fn new(prompt: impl Into<String>, good_label: impl Into<String>, bad_label: impl Into<String>) -> Result<Self> {
        let probe = LabelProbe {
            prompt: prompt.into(),
            good_label: good_label.into(),
            bad_label: bad_label.into(),
        };
        if probe.good_label.is_empty() || probe.bad_label.is_empty() {
            return Err(validation("probe labels must be non-empty"));
        }
        if probe.good_label == probe.bad_label {
            return Err(validation("probe labels must differ"));
        }
        Ok(probe)
    }

    pub fn yes_no(prompt: impl Into<String>) -> Self {
        LabelProbe::new(prompt, " Yes", " No").expect("static labels are valid")
    }

    pub fn swapped(&self) -> Self {
        LabelProbe {
            prompt: self.prompt.clone(),
            good_label: self.bad_label.clone(),
            bad_label: self.good_label.clone(),
        }
    }
}

pub trait LanguageModel: Send + Sync {
    fn handle(&self) -> &PolicyHandle;

    /// `n` raw completions of `prompt`, in sampling order.
    fn generate(&self, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>>;

    /// `log p(label | prompt)` summed over the label's tokens; `None` when the
    /// label has zero or unknown probability.
    fn label_logprob(&self, prompt: &str, label: &str) -> Result<Option<f64>>;

    /// Sum of per-token log-probabilities (nats) of `continuation` after `prefix`.
    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> Result<f64>;

    /// Prompt used for unconditional sampling.
    fn bos_cue(&self) -> &str {
        ""
    }

    /// A copy of this model updated by training on `records`, for backends
    /// that can learn in-process. `None` means the model is unchanged.
    fn adapt(&self, _records: &[FinetuneRecord]) -> Option<Policy> {
        None
    }
}

pub type Policy = Arc<dyn LanguageModel>;

impl fmt::Debug for dyn LanguageModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.handle().backend_kind, self.handle().model_id)
    }
}

pub fn generate(policy: &dyn LanguageModel, prompt: &str, params: &SamplingParams, n: usize) -> Result<Vec<String>> {
    if n < 1 {
        return Err(precondition("n must be at least 1"));
    }
    if params.max_tokens < 1 {
        return Err(precondition("max_tokens must be at least 1"));
    }
    let out = policy.generate(prompt, params, n)?;
    if out.len() != n {
        return Err(Error::Backend {
            model: policy.handle().model_id.clone(),
            attempts: 1,
            message: format!("asked for {n} completions, got {}", out.len()),
        });
    }
    Ok(out)
}

/// Normalized probability of the good label from two label log-probabilities.
pub fn normalize_label_logprobs(good: Option<f64>, bad: Option<f64>, probe: &LabelProbe) -> Result<f64> {
    let live = |lp: Option<f64>| lp.filter(|v| *v > f64::NEG_INFINITY);
    match (live(good), live(bad)) {
        (None, None) => Err(Error::DegenerateProbe {
            good: probe.good_label.clone(),
            bad: probe.bad_label.clone(),
        }),
        (None, Some(_)) => Ok(0.0),
        (Some(_), None) => Ok(1.0),
        (Some(g), Some(b)) => Ok(1.0 / (1.0 + (b - g).exp())),
    }
}

pub fn label_probability(policy: &dyn LanguageModel, probe: &LabelProbe) -> Result<f64> {
    let good = policy.label_logprob(&probe.prompt, &probe.good_label)?;
    let bad = policy.label_logprob(&probe.prompt, &probe.bad_label)?;
    normalize_label_logprobs(good, bad, probe)
}

pub fn sequence_logprob(policy: &dyn LanguageModel, prefix: &str, continuation: &str) -> Result<f64> {
    if continuation.is_empty() {
        return Err(precondition("continuation must be non-empty"));
    }
    policy.sequence_logprob(prefix, continuation)
}

/// Instantiates the backend described by `spec`; `seed` drives all mock randomness.
pub fn build_policy(spec: &BackendSpec, seed: u64) -> Result<Policy> {
    Ok(match spec {
        BackendSpec::RuleMock { corruption } => Arc::new(RuleMock::new(seed, *corruption)?),
        BackendSpec::Categorical { tokens, probs } => {
            Arc::new(CategoricalMock::new(seed, tokens.clone(), probs.clone())?)
        }
        BackendSpec::Constant { text } => Arc::new(ConstantMock::new(text.clone())),
        BackendSpec::Scripted { fixtures_dir } => Arc::new(ScriptedBackend::from_dir(fixtures_dir)?),
        BackendSpec::Http(config) => Arc::new(HttpBackend::new(config.clone())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> LabelProbe {
        LabelProbe::yes_no("Q?")
    }

    #[test]
    fn equal_logprobs_give_half() {
        let p = normalize_label_logprobs(Some(-1.3), Some(-1.3), &probe()).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn ratio_of_probabilities() {
        let p = normalize_label_logprobs(Some(0.3f64.ln()), Some(0.1f64.ln()), &probe()).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_probabilities() {
        assert_eq!(normalize_label_logprobs(None, Some(-2.0), &probe()).unwrap(), 0.0);
        assert_eq!(
            normalize_label_logprobs(Some(f64::NEG_INFINITY), Some(-2.0), &probe()).unwrap(),
            0.0
        );
        assert_eq!(normalize_label_logprobs(Some(-2.0), None, &probe()).unwrap(), 1.0);
        assert!(matches!(
            normalize_label_logprobs(None, Some(f64::NEG_INFINITY), &probe()),
            Err(Error::DegenerateProbe { .. })
        ));
    }

    #[test]
    fn extreme_logprobs_stay_finite() {
        let p = normalize_label_logprobs(Some(-1000.0), Some(-1.0), &probe()).unwrap();
        assert!((0.0..1e-300).contains(&p));
        let p = normalize_label_logprobs(Some(-1.0), Some(-1000.0), &probe()).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn probe_labels_validated() {
        assert!(LabelProbe::new("p", " Yes", " Yes").is_err());
        assert!(LabelProbe::new("p", "", " No").is_err());
    }

    #[test]
    fn n_zero_is_precondition_error() {
        let policy = ConstantMock::new("x.".into());
        assert!(matches!(
            generate(&policy, "p", &SamplingParams::default(), 0),
            Err(Error::Precondition(_))
        ));
        let zero_cap = SamplingParams::default().with_max_tokens(0);
        assert!(generate(&policy, "p", &zero_cap, 1).is_err());
        assert!(sequence_logprob(&policy, "p", "").is_err());
    }
}
