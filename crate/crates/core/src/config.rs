//! Run configuration, read from a TOML document whose keys mirror the
//! field names below.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Mixed into every mock sampling stream; passed through to HTTP backends.
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            top_p: 0.95,
            temperature: 1.0,
            max_tokens: 48,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn with_seed(self, seed: u64) -> Self {
        SamplingParams { seed, ..self }
    }

    pub fn with_max_tokens(self, max_tokens: usize) -> Self {
        SamplingParams { max_tokens, ..self }
    }
}

/// Inverse temperature of the selection distribution `exp(beta * R)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Beta {
    Finite(f64),
    /// Pure argmax selection.
    #[default]
    Infinity,
}

impl Beta {
    pub fn validate(self) -> Result<Self> {
        match self {
            Beta::Finite(b) if !(b.is_finite() && b >= 0.0) => Err(Error::Config(format!(
                "beta must be a non-negative number or \"infinity\", got {b}"
            ))),
            b => Ok(b),
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinity => f.write_str("infinity"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" => Ok(Beta::Infinity),
            other => other
                .parse::<f64>()
                .map(Beta::Finite)
                .map_err(|_| Error::Config(format!("invalid beta `{s}`")))?
                .validate(),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => serializer.serialize_f64(*b),
            Beta::Infinity => serializer.serialize_str("infinity"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        let beta = match Raw::deserialize(deserializer)? {
            Raw::Num(b) => Beta::Finite(b),
            Raw::Int(b) => Beta::Finite(b as f64),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
        };
        beta.validate().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model: String,
    #[serde(default = "HttpConfig::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "HttpConfig::default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "HttpConfig::default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "HttpConfig::default_backoff_ms")]
    pub backoff_ms: u64,
}

impl HttpConfig {
    fn default_timeout_ms() -> u64 {
        30_000
    }
    fn default_max_in_flight() -> usize {
        4
    }
    fn default_max_retries() -> u32 {
        5
    }
    fn default_backoff_ms() -> u64 {
        200
    }

    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key_env: None,
            model: model.into(),
            timeout_ms: Self::default_timeout_ms(),
            max_in_flight: Self::default_max_in_flight(),
            max_retries: Self::default_max_retries(),
            backoff_ms: Self::default_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Heuristic offline model; solves word-removal prompts with the oracle,
    /// failing on a seeded `corruption` fraction of the vocabulary.
    RuleMock {
        #[serde(default)]
        corruption: f64,
    },
    /// Unconditional i.i.d. token model, used for KL checks.
    Categorical {
        tokens: Vec<String>,
        probs: Vec<f64>,
    },
    /// Always emits `text` with probability one.
    Constant {
        text: String,
    },
    Scripted {
        fixtures_dir: PathBuf,
    },
    Http(HttpConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::RuleMock { corruption: 0.0 }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    /// Compact command-line form:
    /// `rule-mock`, `rule-mock:0.5`, `categorical:a=0.5,b=0.5`, `constant:TEXT`,
    /// `scripted:DIR`, `http:MODEL@BASE_URL`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = |why: &str| Error::Config(format!("invalid backend `{s}`: {why}"));
        match (kind, arg) {
            ("rule-mock" | "rule_mock", None) => Ok(BackendSpec::RuleMock { corruption: 0.0 }),
            ("rule-mock" | "rule_mock", Some(rate)) => Ok(BackendSpec::RuleMock {
                corruption: rate.parse().map_err(|_| bad("corruption must be a number"))?,
            }),
            ("categorical", Some(table)) => {
                let mut tokens = Vec::new();
                let mut probs = Vec::new();
                for entry in table.split(',') {
                    let (tok, p) = entry.split_once('=').ok_or_else(|| bad("expected tok=prob"))?;
                    tokens.push(tok.to_string());
                    probs.push(p.parse().map_err(|_| bad("probability must be a number"))?);
                }
                Ok(BackendSpec::Categorical { tokens, probs })
            }
            ("constant", Some(text)) => Ok(BackendSpec::Constant { text: text.to_string() }),
            ("scripted", Some(dir)) => Ok(BackendSpec::Scripted {
                fixtures_dir: PathBuf::from(dir),
            }),
            ("http", Some(rest)) => {
                let (model, url) = rest.split_once('@').ok_or_else(|| bad("expected MODEL@BASE_URL"))?;
                Ok(BackendSpec::Http(HttpConfig::new(url, model)))
            }
            _ => Err(bad("unknown kind")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    Continuous,
    FromScratchConcat,
    EmitOnly,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "continuous" => Ok(Self::Continuous),
            "from_scratch_concat" | "from_scratch" => Ok(Self::FromScratchConcat),
            "emit_only" => Ok(Self::EmitOnly),
            _ => Err(Error::Config(format!("unknown finetune mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinetuneSpec {
    #[default]
    Imitation,
    Http {
        #[serde(flatten)]
        http: HttpConfig,
        #[serde(default = "default_poll_ms")]
        poll_ms: u64,
        #[serde(default = "default_max_polls")]
        max_polls: u32,
    },
}

fn default_poll_ms() -> u64 {
    5_000
}

fn default_max_polls() -> u32 {
    720
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    #[default]
    Summarization,
    WordRemoval,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackSpec {
    /// Feedback already present in the samples file.
    #[default]
    File,
    OracleWordRemoval,
    AnnotationQueue {
        #[serde(default = "default_feedback_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_feedback_timeout_ms() -> u64 {
    3_600_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub port: u16,
    pub token_env: Option<String>,
    pub lease_minutes: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            port: 8080,
            token_env: None,
            lease_minutes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordRemovalConfig {
    pub sentences_per_k: usize,
    /// Contexts per ILF iteration; the rest of the task set is held out.
    pub contexts_per_iteration: usize,
    pub word_list: Option<PathBuf>,
}

impl Default for WordRemovalConfig {
    fn default() -> Self {
        WordRemovalConfig {
            sentences_per_k: 50,
            contexts_per_iteration: 100,
            word_list: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Candidate refinements per context.
    pub n: usize,
    pub beta: Beta,
    /// Number of ILF iterations.
    pub k: usize,
    /// Prompt-loss weight.
    pub lambda: f64,
    pub finetune_mode: FinetuneMode,
    pub task: TaskFamily,
    /// Refine without showing the feedback (ablation).
    pub refine_without_feedback: bool,
    pub parallelism: usize,
    pub templates_dir: Option<PathBuf>,
    pub sampling: SamplingParams,
    /// The policy being trained.
    pub backend: BackendSpec,
    /// The policy that writes refinements; defaults to `backend`.
    pub refine_backend: Option<BackendSpec>,
    pub scorer: crate::select::ScorerKind,
    /// Policy queried by InstructRM scorers; defaults to the refinement policy.
    pub scorer_backend: Option<BackendSpec>,
    /// Remote embedding endpoint; the hashing embedder is used when absent.
    pub embedding: Option<HttpConfig>,
    pub finetune: FinetuneSpec,
    pub feedback: FeedbackSpec,
    pub serve: ServeConfig,
    pub wordremoval: WordRemovalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n: 5,
            beta: Beta::Infinity,
            k: 1,
            lambda: 0.0,
            finetune_mode: FinetuneMode::Continuous,
            task: TaskFamily::Summarization,
            refine_without_feedback: false,
            parallelism: 4,
            templates_dir: None,
            sampling: SamplingParams::default(),
            backend: BackendSpec::default(),
            refine_backend: None,
            scorer: crate::select::ScorerKind::default(),
            scorer_backend: None,
            embedding: None,
            finetune: FinetuneSpec::Imitation,
            feedback: FeedbackSpec::File,
            serve: ServeConfig::default(),
            wordremoval: WordRemovalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n < 1 {
            return fail("n must be at least 1".into());
        }
        if self.k < 1 {
            return fail("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} is outside [0, 1]", self.lambda));
        }
        if self.parallelism < 1 {
            return fail("parallelism must be at least 1".into());
        }
        if self.sampling.max_tokens < 1 {
            return fail("sampling.max_tokens must be at least 1".into());
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return fail(format!("sampling.top_p {} is outside (0, 1]", self.sampling.top_p));
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return fail("sampling.temperature must be non-negative".into());
        }
        self.beta.validate()?;
        self.scorer.validate()?;
        Ok(())
    }

    pub fn refine_backend(&self) -> &BackendSpec {
        self.refine_backend.as_ref().unwrap_or(&self.backend)
    }

    pub fn scorer_backend(&self) -> &BackendSpec {
        self.scorer_backend.as_ref().unwrap_or_else(|| self.refine_backend())
    }

    pub fn scorer_spec(&self) -> crate::select::ScorerSpec {
        crate::select::ScorerSpec {
            kind: self.scorer,
            beta: self.beta,
        }
    }

    pub fn sampling_params(&self) -> SamplingParams {
        self.sampling.with_seed(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.sampling.top_p, 0.95);
        assert_eq!(c.sampling.temperature, 1.0);
        assert_eq!(c.sampling.max_tokens, 48);
        assert_eq!(c.n, 5);
        assert_eq!(c.beta, Beta::Infinity);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            seed = 42
            n = 3
            beta = 2.5
            k = 2
            lambda = 0.1
            finetune_mode = "from_scratch_concat"
            task = "word_removal"

            [sampling]
            max_tokens = 200

            [backend]
            kind = "rule_mock"
            corruption = 0.5

            [scorer]
            kind = "instructrm_single"
            index = 3

            [finetune]
            kind = "http"
            base_url = "http://localhost:9"
            model = "base"
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.beta, Beta::Finite(2.5));
        assert_eq!(c.sampling.top_p, 0.95);
        assert_eq!(c.sampling.max_tokens, 200);
        assert_eq!(c.backend, BackendSpec::RuleMock { corruption: 0.5 });
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn beta_parses_infinity_and_numbers() {
        assert_eq!("infinity".parse::<Beta>().unwrap(), Beta::Infinity);
        assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Infinity);
        assert_eq!("0".parse::<Beta>().unwrap(), Beta::Finite(0.0));
        assert!("-1".parse::<Beta>().is_err());
        let c = RunConfig::from_toml("beta = \"infinity\"\n").unwrap();
        assert_eq!(c.beta, Beta::Infinity);
        let c = RunConfig::from_toml("beta = 3\n").unwrap();
        assert_eq!(c.beta, Beta::Finite(3.0));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("n = 0\n").is_err());
        assert!(RunConfig::from_toml("k = 0\n").is_err());
        assert!(RunConfig::from_toml("lambda = 2.0\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn backend_short_forms() {
        assert_eq!(
            "rule-mock:0.5".parse::<BackendSpec>().unwrap(),
            BackendSpec::RuleMock { corruption: 0.5 }
        );
        assert_eq!(
            "categorical:a=0.25,b=0.75".parse::<BackendSpec>().unwrap(),
            BackendSpec::Categorical {
                tokens: vec!["a".into(), "b".into()],
                probs: vec![0.25, 0.75]
            }
        );
        match "http:gpt@http://127.0.0.1:8000".parse::<BackendSpec>().unwrap() {
            BackendSpec::Http(h) => {
                assert_eq!(h.model, "gpt");
                assert_eq!(h.base_url, "http://127.0.0.1:8000");
                assert_eq!(h.max_retries, 5);
            }
            other => panic!("{other:?}"),
        }
        assert!("nope".parse::<BackendSpec>().is_err());
    }
}
