//! Scores candidate refinements and turns the scores into a selection plus weights.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{http::HttpClient, label_probability, LabelProbe, LanguageModel, Policy};
use crate::config::{Beta, HttpConfig};
use crate::error::{precondition, validation, Error, Result};
use crate::parallel::ordered_map;
use crate::record::{RefinementSet, Sample, WEIGHT_FLOOR};
use crate::refine::{PromptValues, TemplateName, TemplateSet};
use crate::rng;
use crate::tokenize::count_tokens;

pub const INSTRUCTRM_PROMPTS: u8 = 5;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    InstructrmEnsemble,
    InstructrmSingle {
        index: u8,
    },
    EmbeddingSimilarity,
    /// Token count of the candidate; ignores context and feedback.
    MaxLength,
    /// Seeded uniform score; ignores everything but the sample id and position.
    Random,
}

impl ScorerKind {
    pub fn validate(self) -> Result<Self> {
        if let ScorerKind::InstructrmSingle { index } = self {
            if !(1..=INSTRUCTRM_PROMPTS).contains(&index) {
                return Err(validation(format!("InstructRM prompt index {index} is outside 1..=5")));
            }
        }
        Ok(self)
    }

    pub fn needs_policy(self) -> bool {
        matches!(
            self,
            ScorerKind::InstructrmEnsemble | ScorerKind::InstructrmSingle { .. }
        )
    }

    /// Score given to an empty candidate without consulting any model; lies
    /// strictly below every score the scorer can produce.
    pub fn floor(self) -> f64 {
        match self {
            ScorerKind::EmbeddingSimilarity => -2.0,
            _ => -1.0,
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerKind::InstructrmEnsemble => f.write_str("instructrm_ensemble"),
            ScorerKind::InstructrmSingle { index } => write!(f, "instructrm_single:{index}"),
            ScorerKind::EmbeddingSimilarity => f.write_str("embedding_similarity"),
            ScorerKind::MaxLength => f.write_str("max_length"),
            ScorerKind::Random => f.write_str("random"),
        }
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    /// `instructrm_ensemble`, `instructrm_single:3`, `embedding_similarity`,
    /// `max_length`, `random`; dashes are accepted for underscores.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        let kind = match s.as_str() {
            "instructrm_ensemble" | "ensemble" => ScorerKind::InstructrmEnsemble,
            "embedding_similarity" | "embedding" => ScorerKind::EmbeddingSimilarity,
            "max_length" => ScorerKind::MaxLength,
            "random" => ScorerKind::Random,
            other => {
                let index = other
                    .strip_prefix("instructrm_single:")
                    .or_else(|| other.strip_prefix("instructrm_"))
                    .and_then(|i| i.parse().ok())
                    .ok_or_else(|| Error::UnknownMethod(format!("unknown scorer `{other}`")))?;
                ScorerKind::InstructrmSingle { index }
            }
        };
        kind.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub beta: Beta,
}

/// Index of the largest score; the lowest index wins ties.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(precondition("cannot select from an empty score list"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(validation("scores contain NaN"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Self-normalized weights `softmax(beta * scores)`; one-hot at
/// [`select_best`] when `beta` is infinite. Weights below the floor are
/// reported as zero.
pub fn importance_weights(scores: &[f64], beta: Beta) -> Result<Vec<f64>> {
    let best = select_best(scores)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(validation("scores must be finite"));
    }
    let beta = match beta.validate()? {
        Beta::Infinity => {
            let mut w = vec![0.0; scores.len()];
            w[best] = 1.0;
            return Ok(w);
        }
        Beta::Finite(b) => b,
    };
    let max = scores[best];
    let exps: Vec<f64> = scores.iter().map(|s| (beta * (s - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps
        .into_iter()
        .map(|e| {
            let w = e / total;
            if w < WEIGHT_FLOOR {
                0.0
            } else {
                w
            }
        })
        .collect())
}

/// Labels answered by InstructRM prompt `index`: prompts 3 and 5 ask for
/// True/False, the others for Yes/No.
pub fn instructrm_labels(index: u8) -> (&'static str, &'static str) {
    match index {
        3 | 5 => (" True", " False"),
        _ => (" Yes", " No"),
    }
}

pub fn instructrm_probe(templates: &TemplateSet, sample: &Sample, candidate: &str, index: u8) -> Result<LabelProbe> {
    let name = TemplateName::instructrm(index)?;
    let values = PromptValues::from_sample(sample).with("refinement", candidate);
    let (good, bad) = instructrm_labels(index);
    LabelProbe::new(templates.render(name, &values)?, good, bad)
}

pub fn score_instructrm(
    policy: &dyn LanguageModel,
    templates: &TemplateSet,
    sample: &Sample,
    candidate: &str,
    index: u8,
) -> Result<f64> {
    label_probability(policy, &instructrm_probe(templates, sample, candidate, index)?)
}

/// Mean of the five single-prompt scores. Every member is attempted; failures
/// are reported together.
pub fn score_ensemble(
    policy: &dyn LanguageModel,
    templates: &TemplateSet,
    sample: &Sample,
    candidate: &str,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(INSTRUCTRM_PROMPTS as usize);
    let mut failed = Vec::new();
    let mut first = None;
    for index in 1..=INSTRUCTRM_PROMPTS {
        match score_instructrm(policy, templates, sample, candidate, index) {
            Ok(s) => scores.push(s),
            Err(e) => {
                failed.push(index);
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(e) => Err(Error::Ensemble {
            failed,
            first: Box::new(e),
        }),
        None => Ok(mean(&scores)),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing of lower-cased alphanumeric words.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(validation("embedding dimension must be positive"));
        }
        Ok(HashingEmbedder { dim, seed })
    }

    /// Bucket and sign of a word.
    pub fn feature(&self, word: &str) -> (usize, f64) {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(word.as_bytes())
            .finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(bytes) % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let (bucket, sign) = self.feature(&word.to_lowercase());
            v[bucket] += sign;
        }
        Ok(v)
    }
}

/// Remote embeddings: `POST {base_url}/v1/embeddings` with `{model, input}`,
/// reading `data[0].embedding`.
#[derive(Debug)]
pub struct HttpEmbedder {
    client: HttpClient,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig) -> Result<Self> {
        Ok(HttpEmbedder {
            client: HttpClient::new(config)?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let response: EmbeddingResponse = self.client.post_json(
            "/v1/embeddings",
            &EmbeddingRequest {
                model: &self.client.config().model,
                input: text,
            },
        )?;
        response
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::Backend {
                model: self.client.config().model.clone(),
                attempts: 1,
                message: "embedding response has no data".into(),
            })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(validation("embedding dimensions differ"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn score_embedding(embedder: &dyn Embedder, feedback: &str, candidate: &str) -> Result<f64> {
    cosine(&embedder.embed(feedback)?, &embedder.embed(candidate)?)
}

/// A configured scorer, ready to score the candidates of a sample.
pub struct Scorer {
    kind: ScorerKind,
    policy: Option<Policy>,
    embedder: Arc<dyn Embedder>,
    templates: TemplateSet,
    seed: u64,
    parallelism: usize,
}

impl Scorer {
    pub fn new(kind: ScorerKind, policy: Option<Policy>, templates: TemplateSet, seed: u64) -> Result<Self> {
        let kind = kind.validate()?;
        if kind.needs_policy() && policy.is_none() {
            return Err(precondition(format!(
                "scorer {kind} needs a policy with label probabilities"
            )));
        }
        Ok(Scorer {
            kind,
            policy,
            embedder: Arc::new(HashingEmbedder::default()),
            templates,
            seed,
            parallelism: 1,
        })
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    fn score_one(&self, sample: &Sample, position: usize, candidate: &str) -> Result<f64> {
        if candidate.trim().is_empty() {
            return Ok(self.kind.floor());
        }
        match self.kind {
            ScorerKind::InstructrmEnsemble => score_ensemble(self.policy()?, &self.templates, sample, candidate),
            ScorerKind::InstructrmSingle { index } => {
                score_instructrm(self.policy()?, &self.templates, sample, candidate, index)
            }
            ScorerKind::EmbeddingSimilarity => score_embedding(self.embedder.as_ref(), &sample.feedback, candidate),
            ScorerKind::MaxLength => Ok(count_tokens(candidate) as f64),
            ScorerKind::Random => Ok(rng::unit_hash(
                self.seed,
                "random-scorer",
                &[sample.id.as_bytes(), &(position as u64).to_le_bytes()],
            )),
        }
    }

    fn policy(&self) -> Result<&dyn LanguageModel> {
        self.policy
            .as_deref()
            .ok_or_else(|| precondition("scorer has no policy"))
    }

    /// Scores in candidate order; empty candidates get [`ScorerKind::floor`].
    pub fn score(&self, sample: &Sample, candidates: &[String]) -> Result<Vec<f64>> {
        ordered_map(candidates, self.parallelism, |i, c| self.score_one(sample, i, c))
            .into_iter()
            .collect()
    }

    /// Scores the set and fills in its weights and selected index. Fails when
    /// every candidate is empty.
    pub fn select(&self, sample: &Sample, mut set: RefinementSet, beta: Beta) -> Result<RefinementSet> {
        if set.candidates.iter().all(|c| c.trim().is_empty()) {
            return Err(precondition(format!(
                "every refinement of sample `{}` is empty; nothing to select",
                set.sample_id
            )));
        }
        set.scores = self.score(sample, &set.candidates)?;
        set.weights = importance_weights(&set.scores, beta)?;
        set.selected_index = Some(select_best(&set.scores)?);
        Ok(set)
    }
}
