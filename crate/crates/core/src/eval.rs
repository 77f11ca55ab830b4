//! Evaluation statistics: proportions with binomial standard errors, ranking
//! with ties, win rates, per-token NLL, Monte-Carlo KL and reward-model
//! accuracy.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{self, label_probability, LabelProbe, LanguageModel};
use crate::config::SamplingParams;
use crate::error::{precondition, validation, Error, Result};
use crate::parallel::{ordered_map, ordered_try_map};
use crate::record::{FinetuneRecord, Preference, Sample};
use crate::refine::{PromptValues, TemplateName, TemplateSet};
use crate::tokenize::count_tokens;

pub const DEFAULT_KL_SAMPLES: usize = 2000;
pub const DEFAULT_KL_SAMPLE_LEN: usize = 64;

/// Binomial standard error `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

/// `(successes / n, binomial_se)`; `(0, 0)` for `n = 0`.
pub fn proportion(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let p = successes as f64 / n as f64;
    (p, binomial_se(p, n))
}

/// Mean and standard error of the mean (sample standard deviation over `sqrt(n)`).
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `mean ± se` as percentages with one decimal.
pub fn format_percent(p: f64, se: f64) -> String {
    format!("{:.1} ± {:.1}", p * 100.0, se * 100.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingSheet {
    pub item_id: String,
    pub method_names: Vec<String>,
    /// Standard competition ranks, 1 is best.
    pub ranks: Vec<u32>,
}

impl RankingSheet {
    pub fn validate(&self) -> Result<()> {
        if self.method_names.len() != self.ranks.len() {
            return Err(validation(format!(
                "sheet `{}` has {} method(s) but {} rank(s)",
                self.item_id,
                self.method_names.len(),
                self.ranks.len()
            )));
        }
        if self.method_names.iter().collect::<HashSet<_>>().len() != self.method_names.len() {
            return Err(validation(format!("sheet `{}` repeats a method", self.item_id)));
        }
        validate_competition_ranking(&self.ranks)
    }

    pub fn rank_of(&self, method: &str) -> Option<u32> {
        self.method_names
            .iter()
            .position(|m| m == method)
            .map(|i| self.ranks[i])
    }
}

/// Every rank `r` must equal one plus the number of entries ranked better.
pub fn validate_competition_ranking(ranks: &[u32]) -> Result<()> {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    for (i, &r) in sorted.iter().enumerate() {
        let first = sorted.partition_point(|&x| x < r);
        if r as usize != first + 1 {
            return Err(validation(format!(
                "{ranks:?} is not a standard competition ranking (entry {i})"
            )));
        }
    }
    Ok(())
}

/// Resolves ties: a group of `n` entries sharing rank `r` all get
/// `(r + (r + n - 1)) / 2`.
pub fn fractional_ranks(ranks: &[u32]) -> Result<Vec<f64>> {
    validate_competition_ranking(ranks)?;
    Ok(ranks
        .iter()
        .map(|&r| {
            let n = ranks.iter().filter(|&&x| x == r).count() as f64;
            (r as f64 + (r as f64 + n - 1.0)) / 2.0
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinRate {
    pub p: f64,
    pub se: f64,
    pub n: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

/// Fraction of sheets in which `method_a` ranks better than `method_b`,
/// counting ties as half a win.
pub fn win_rate(sheets: &[RankingSheet], method_a: &str, method_b: &str) -> Result<WinRate> {
    if sheets.is_empty() {
        return Err(precondition("no ranking sheets"));
    }
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for sheet in sheets {
        sheet.validate()?;
        let frac = fractional_ranks(&sheet.ranks)?;
        let lookup = |m: &str| {
            sheet
                .method_names
                .iter()
                .position(|x| x == m)
                .map(|i| frac[i])
                .ok_or_else(|| Error::UnknownMethod(format!("method `{m}` missing from sheet `{}`", sheet.item_id)))
        };
        let (a, b) = (lookup(method_a)?, lookup(method_b)?);
        if a < b {
            wins += 1;
        } else if a == b {
            ties += 1;
        } else {
            losses += 1;
        }
    }
    let n = sheets.len();
    let p = (wins as f64 + 0.5 * ties as f64) / n as f64;
    Ok(WinRate {
        p,
        se: binomial_se(p, n),
        n,
        wins,
        ties,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRank {
    pub method: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Mean fractional rank of every method, in order of first appearance.
pub fn mean_ranks(sheets: &[RankingSheet]) -> Result<Vec<MeanRank>> {
    let mut methods: Vec<String> = Vec::new();
    for sheet in sheets {
        sheet.validate()?;
        for m in &sheet.method_names {
            if !methods.contains(m) {
                methods.push(m.clone());
            }
        }
    }
    let mut out = Vec::new();
    for method in methods {
        let mut xs = Vec::new();
        for sheet in sheets {
            if let Some(i) = sheet.method_names.iter().position(|m| *m == method) {
                xs.push(fractional_ranks(&sheet.ranks)?[i]);
            }
        }
        let (mean, se) = mean_sem(&xs);
        out.push(MeanRank {
            method,
            mean,
            se,
            n: xs.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllReport {
    pub mean_nll_per_token: f64,
    pub se: f64,
    pub n: usize,
}

/// Mean over records of `-log p(completion | prompt) / tokens(completion)`.
pub fn dataset_nll(policy: &dyn LanguageModel, dataset: &[FinetuneRecord], parallelism: usize) -> Result<NllReport> {
    if dataset.is_empty() {
        return Err(precondition("empty dataset"));
    }
    let (values, err) = ordered_try_map(dataset, parallelism, |_, r| {
        let lp = backend::sequence_logprob(policy, &r.prompt, &r.completion)?;
        Ok::<_, Error>(-lp / count_tokens(&r.completion).max(1) as f64)
    });
    if let Some(e) = err {
        return Err(e);
    }
    let (mean, se) = mean_sem(&values);
    Ok(NllReport {
        mean_nll_per_token: mean + 0.0,
        se,
        n: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlEstimate {
    pub kl_nats: f64,
    pub sem: f64,
    pub n_samples: usize,
}

/// Monte-Carlo `KL(p || q)`: draws `n_samples` unconditional samples of
/// `sample_len` tokens from `p` and averages `log p(x) - log q(x)`.
pub fn estimate_kl(
    p: &dyn LanguageModel,
    q: &dyn LanguageModel,
    n_samples: usize,
    sample_len: usize,
    seed: u64,
    parallelism: usize,
) -> Result<KlEstimate> {
    if n_samples == 0 {
        return Err(precondition("n_samples must be at least 1"));
    }
    if sample_len == 0 {
        return Err(precondition("sample_len must be at least 1"));
    }
    let cue = p.bos_cue();
    let params = SamplingParams::default().with_max_tokens(sample_len).with_seed(seed);
    let samples = backend::generate(p, cue, &params, n_samples)?;
    let (diffs, err) = ordered_try_map(&samples, parallelism, |_, x| {
        let lp = backend::sequence_logprob(p, cue, x)?;
        let lq = backend::sequence_logprob(q, q.bos_cue(), x)?;
        Ok::<_, Error>(lp - lq)
    });
    if let Some(e) = err {
        return Err(e);
    }
    let (kl, sem) = mean_sem(&diffs);
    Ok(KlEstimate {
        kl_nats: kl,
        sem,
        n_samples,
    })
}

/// Repeats [`estimate_kl`] with seeds `seed..seed + runs` and reports the
/// mean across runs with the standard error across runs.
pub fn estimate_kl_repeated(
    p: &dyn LanguageModel,
    q: &dyn LanguageModel,
    n_samples: usize,
    sample_len: usize,
    seed: u64,
    runs: usize,
    parallelism: usize,
) -> Result<KlEstimate> {
    if runs == 0 {
        return Err(precondition("runs must be at least 1"));
    }
    if runs == 1 {
        return estimate_kl(p, q, n_samples, sample_len, seed, parallelism);
    }
    let per_run = (0..runs as u64)
        .map(|r| estimate_kl(p, q, n_samples, sample_len, seed.wrapping_add(r), parallelism).map(|e| e.kl_nats))
        .collect::<Result<Vec<_>>>()?;
    let (kl, sem) = mean_sem(&per_run);
    Ok(KlEstimate {
        kl_nats: kl,
        sem,
        n_samples: n_samples * runs,
    })
}

/// `ln n - (n - 1) / n`, the KL between best-of-`n` sampling and its base policy.
pub fn analytic_bon_kl(n: u64) -> Result<f64> {
    if n < 1 {
        return Err(precondition("n must be at least 1"));
    }
    let n = n as f64;
    Ok(n.ln() - (n - 1.0) / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmProtocol {
    /// Score each summary separately with the Yes/No probe; the higher wins,
    /// exact ties go to A.
    Binary,
    /// One probe over both summaries answered with A or B; `p(A) >= 0.5` picks A.
    Comparison,
}

impl std::str::FromStr for RmProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(RmProtocol::Binary),
            "comparison" => Ok(RmProtocol::Comparison),
            other => Err(Error::UnknownMethod(format!("unknown reward-model protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmAccuracy {
    pub accuracy: f64,
    pub se: f64,
    pub n: usize,
    pub predictions: Vec<Preference>,
}

pub fn rm_prediction(
    policy: &dyn LanguageModel,
    templates: &TemplateSet,
    sample: &Sample,
    protocol: RmProtocol,
) -> Result<Preference> {
    let cmp = sample
        .comparison
        .as_ref()
        .ok_or_else(|| validation(format!("sample `{}` has no comparison", sample.id)))?;
    let base = PromptValues::from_sample(sample);
    match protocol {
        RmProtocol::Binary => {
            let score = |summary: &str| -> Result<f64> {
                let prompt = templates.render(TemplateName::RmBinary, &base.clone().with("summary", summary))?;
                label_probability(policy, &LabelProbe::yes_no(prompt))
            };
            let (a, b) = (score(&cmp.output_a)?, score(&cmp.output_b)?);
            Ok(if a >= b { Preference::A } else { Preference::B })
        }
        RmProtocol::Comparison => {
            let prompt = templates.render(
                TemplateName::RmComparison,
                &base
                    .with("summary_a", cmp.output_a.as_str())
                    .with("summary_b", cmp.output_b.as_str()),
            )?;
            let p = label_probability(policy, &LabelProbe::new(prompt, " A", " B")?)?;
            Ok(if p >= 0.5 { Preference::A } else { Preference::B })
        }
    }
}

/// Accuracy of predicting the human-preferred summary of each pair.
pub fn rm_accuracy(
    policy: &dyn LanguageModel,
    templates: &TemplateSet,
    pairs: &[Sample],
    protocol: RmProtocol,
    parallelism: usize,
) -> Result<RmAccuracy> {
    if pairs.is_empty() {
        return Err(precondition("no comparison pairs"));
    }
    if let Some(s) = pairs.iter().find(|s| s.comparison.is_none()) {
        return Err(validation(format!("sample `{}` has no comparison", s.id)));
    }
    let predictions = ordered_map(pairs, parallelism, |_, s| rm_prediction(policy, templates, s, protocol))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let correct = pairs
        .iter()
        .zip(&predictions)
        .filter(|(s, p)| s.comparison.as_ref().is_some_and(|c| c.preferred == **p))
        .count();
    let (accuracy, se) = proportion(correct, pairs.len());
    Ok(RmAccuracy {
        accuracy,
        se,
        n: pairs.len(),
        predictions,
    })
}
