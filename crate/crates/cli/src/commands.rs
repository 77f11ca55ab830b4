use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use ilf_core::backend::build_policy;
use ilf_core::config::{TaskFamily, WordRemovalConfig};
use ilf_core::eval::{self, format_percent, RankingSheet, RmProtocol};
use ilf_core::ilf::{build_scorer, finetune_records, Context, Ilf};
use ilf_core::record::{
    load_finetune_dataset, load_refinements, load_samples, partition, read_jsonl_from, write_finetune_dataset,
    FinetuneRecord, RefinementSet, Sample,
};
use ilf_core::refine::{generate_refinements, TemplateName, TemplateSet};
use ilf_core::rng;
use ilf_core::wordremoval::{self, RemovalTask};
use ilf_core::{importance_weights, select_best, RunConfig};

use crate::GlobalArgs;

/// `println!` that returns the write error, so a closed pipe ends the command
/// instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

/// Bad command-line input that clap cannot catch; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// JSONL from a file, or from stdin for `-`.
fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path == Path::new("-") {
        return Ok(read_jsonl_from(io::stdin().lock(), Path::new("<stdin>"))?);
    }
    let file = File::open(path).map_err(|e| ilf_core::Error::io(path, e))?;
    Ok(read_jsonl_from(BufReader::new(file), path)?)
}

/// JSONL to a file, or to stdout when `path` is `None`.
fn write_output<T: Serialize>(path: Option<&Path>, records: &[T]) -> Result<()> {
    match path {
        Some(p) => Ok(ilf_core::record::write_jsonl(p, records)?),
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            out.write_all(&ilf_core::record::to_jsonl(records)?)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    say!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn word_list(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        None => Ok(wordremoval::default_word_list()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ilf_core::Error::io(p, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect())
        }
    }
}

#[derive(Args, Debug)]
pub struct WordgenArgs {
    /// File with one word per line; defaults to the built-in 25-word list.
    #[arg(long)]
    word_list: Option<PathBuf>,
    #[arg(long)]
    sentences_per_k: Option<usize>,
    /// Output tasks.jsonl; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

pub fn wordgen(g: &GlobalArgs, a: WordgenArgs) -> Result<()> {
    let config = g.run_config()?;
    let words = word_list(a.word_list.as_deref().or(config.wordremoval.word_list.as_deref()))?;
    let per_k = a.sentences_per_k.unwrap_or(config.wordremoval.sentences_per_k);
    let tasks = wordremoval::generate_task_set(config.seed, &words, per_k)?;
    write_output(a.out.as_deref(), &tasks)
}

#[derive(Args, Debug)]
pub struct WordevalArgs {
    /// tasks.jsonl, or `-` for stdin.
    #[arg(default_value = "-")]
    tasks: PathBuf,
    /// Score the oracle completions instead of a backend.
    #[arg(long, conflicts_with = "predictions")]
    oracle: bool,
    /// JSONL of {task_id, prediction} to score instead of a backend.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Replace this fraction of predictions with a guaranteed miss.
    #[arg(long)]
    corrupt: Option<f64>,
    /// Write per-task results.jsonl here.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Deserialize)]
struct PredictionLine {
    task_id: String,
    prediction: String,
}

pub fn wordeval(g: &GlobalArgs, a: WordevalArgs) -> Result<()> {
    let config = g.run_config()?;
    let tasks: Vec<RemovalTask> = read_input(&a.tasks)?;
    let mut predictions = if a.oracle {
        wordremoval::oracle_predictions(&tasks)
    } else if let Some(path) = &a.predictions {
        let lines: Vec<PredictionLine> = read_input(path)?;
        let by_id: std::collections::HashMap<&str, &str> = lines
            .iter()
            .map(|l| (l.task_id.as_str(), l.prediction.as_str()))
            .collect();
        tasks
            .iter()
            .map(|t| {
                by_id
                    .get(t.id.as_str())
                    .map(|p| p.to_string())
                    .ok_or_else(|| usage(format!("no prediction for task `{}`", t.id)))
            })
            .collect::<Result<_>>()?
    } else {
        let policy = build_policy(&config.backend, config.seed)?;
        let templates = TemplateSet::load(config.templates_dir.as_deref())?;
        wordremoval::predict(
            policy.as_ref(),
            &tasks,
            &templates,
            &config.sampling_params(),
            config.parallelism,
        )?
    };
    if let Some(rate) = a.corrupt {
        predictions = wordremoval::corrupt_predictions(&predictions, &tasks, rate, config.seed)?;
    }
    let report = wordremoval::evaluate_exact_match(&predictions, &tasks)?;
    if let Some(path) = &a.results {
        ilf_core::record::write_jsonl(path, &wordremoval::task_results(&predictions, &tasks, &report))?;
    }
    if a.json {
        return print_json(&serde_json::json!({
            "n": report.n, "accuracy": report.accuracy, "se": report.se, "per_l": report.per_l,
        }));
    }
    say!(
        "accuracy {} (n={})",
        format_percent(report.accuracy, report.se),
        report.n
    );
    for l in &report.per_l {
        say!("  l={} {} (n={})", l.l, format_percent(l.accuracy, l.se), l.n);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// samples.jsonl with initial outputs and feedback.
    #[arg(long)]
    samples: PathBuf,
    /// Output refinements.jsonl; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

pub fn refine(g: &GlobalArgs, a: RefineArgs) -> Result<()> {
    let config = g.run_config()?;
    let samples = load_samples(&a.samples)?;
    let policy = build_policy(config.refine_backend(), config.seed)?;
    let templates = TemplateSet::load(config.templates_dir.as_deref())?;
    let name = if config.refine_without_feedback {
        TemplateName::RefineWithoutFeedback
    } else {
        TemplateName::RefineWithFeedback
    };
    let template = templates.get(name);
    let (sets, err) = ilf_core::parallel::ordered_try_map(&samples, config.parallelism, |_, s| {
        let seed = rng::derive_seed(config.seed, "refine", &[s.id.as_bytes()]);
        generate_refinements(policy.as_ref(), template, s, config.n, &config.sampling.with_seed(seed))
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    write_output(a.out.as_deref(), &sets)
}

fn match_samples<'a>(samples: &'a [Sample], sets: &[RefinementSet]) -> Result<Vec<&'a Sample>> {
    sets.iter()
        .map(|set| {
            samples
                .iter()
                .find(|s| s.id == set.sample_id)
                .ok_or_else(|| usage(format!("no sample with id `{}`", set.sample_id)))
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    refinements: PathBuf,
    /// Output scored refinements.jsonl; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

pub fn select(g: &GlobalArgs, a: SelectArgs) -> Result<()> {
    let config = g.run_config()?;
    let samples = load_samples(&a.samples)?;
    let sets = load_refinements(&a.refinements)?;
    let matched = match_samples(&samples, &sets)?;
    let templates = TemplateSet::load(config.templates_dir.as_deref())?;
    let scorer = build_scorer(&config, &templates)?;
    let scored = sets
        .into_iter()
        .zip(matched)
        .map(|(set, sample)| scorer.select(sample, set, config.beta))
        .collect::<ilf_core::Result<Vec<_>>>()?;
    write_output(a.out.as_deref(), &scored)
}

#[derive(Args, Debug)]
pub struct WeightArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Scored refinements.jsonl.
    #[arg(long)]
    refinements: PathBuf,
    /// Output finetune.jsonl.
    #[arg(short, long)]
    out: PathBuf,
}

pub fn weight(g: &GlobalArgs, a: WeightArgs) -> Result<()> {
    let config = g.run_config()?;
    let samples = load_samples(&a.samples)?;
    let sets = load_refinements(&a.refinements)?;
    let matched = match_samples(&samples, &sets)?;
    let templates = TemplateSet::load(config.templates_dir.as_deref())?;
    let mut records: Vec<FinetuneRecord> = Vec::new();
    for (mut set, sample) in sets.into_iter().zip(matched) {
        if set.scores.len() != set.candidates.len() {
            return Err(usage(format!(
                "refinements for `{}` are not scored; run `select` first",
                set.sample_id
            )));
        }
        set.weights = importance_weights(&set.scores, config.beta)?;
        set.selected_index = Some(select_best(&set.scores)?);
        set.validate()?;
        let prompt = Context::summarization(sample.clone()).finetune_prompt(&templates)?;
        records.extend(finetune_records(&prompt, &set, config.beta));
    }
    write_finetune_dataset(&records, &a.out)?;
    eprintln!("wrote {} record(s) to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct IlfRunArgs {
    /// samples.jsonl of contexts (summarization), or tasks.jsonl (word removal).
    /// Word-removal runs generate their tasks when omitted.
    #[arg(long)]
    contexts: Option<PathBuf>,
}

#[derive(Serialize)]
struct HeldOutReport {
    split: &'static str,
    policy: String,
    n: usize,
    accuracy: f64,
    se: f64,
}

fn word_removal_split(
    config: &RunConfig,
    tasks: Vec<RemovalTask>,
) -> Result<(Vec<Vec<RemovalTask>>, Vec<RemovalTask>)> {
    let WordRemovalConfig {
        contexts_per_iteration, ..
    } = config.wordremoval;
    let mut keyed: Vec<(f64, RemovalTask)> = tasks
        .into_iter()
        .map(|t| (rng::unit_hash(config.seed, "ilf-split", &[t.id.as_bytes()]), t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let shuffled: Vec<RemovalTask> = keyed.into_iter().map(|(_, t)| t).collect();
    let needed = contexts_per_iteration * config.k;
    if contexts_per_iteration == 0 || needed > shuffled.len() {
        return Err(usage(format!(
            "{} iteration(s) of {contexts_per_iteration} contexts need {needed} tasks, only {} available",
            config.k,
            shuffled.len()
        )));
    }
    let held_out = shuffled[needed..].to_vec();
    let parts = shuffled[..needed]
        .chunks(contexts_per_iteration)
        .map(<[_]>::to_vec)
        .collect();
    Ok((parts, held_out))
}

pub fn ilf_run(g: &GlobalArgs, a: IlfRunArgs) -> Result<()> {
    let config = g.run_config()?;
    let run_dir = g.run_dir.clone().ok_or_else(|| usage("ilf-run needs --run-dir"))?;
    let started = Instant::now();
    match config.task {
        TaskFamily::Summarization => {
            let path = a
                .contexts
                .ok_or_else(|| usage("summarization runs need --contexts samples.jsonl"))?;
            let samples = load_samples(&path)?;
            let parts: Vec<Vec<Context>> = partition(&samples, config.k)?
                .into_iter()
                .map(|p| p.into_iter().map(Context::summarization).collect())
                .collect();
            let ilf = Ilf::from_config(config, &run_dir)?;
            let out = ilf.run(&parts)?;
            report_iterations(&out.state, out.resumed_from)?;
        }
        TaskFamily::WordRemoval => {
            let tasks = match &a.contexts {
                Some(path) => read_input(path)?,
                None => {
                    let words = word_list(config.wordremoval.word_list.as_deref())?;
                    wordremoval::generate_task_set(config.seed, &words, config.wordremoval.sentences_per_k)?
                }
            };
            let (parts, held_out) = word_removal_split(&config, tasks)?;
            let contexts: Vec<Vec<Context>> = parts
                .iter()
                .map(|p| p.iter().cloned().map(Context::word_removal).collect())
                .collect();
            let ilf = Ilf::from_config(config.clone(), &run_dir)?;
            let out = ilf.run(&contexts)?;
            report_iterations(&out.state, out.resumed_from)?;

            let held_in: Vec<RemovalTask> = parts.into_iter().flatten().collect();
            let params = config.sampling_params();
            let mut reports = Vec::new();
            for (label, policy) in [("base", ilf.root()), ("trained", &out.policy)] {
                for (split, tasks) in [("held_in", &held_in), ("held_out", &held_out)] {
                    if tasks.is_empty() {
                        continue;
                    }
                    let preds =
                        wordremoval::predict(policy.as_ref(), tasks, ilf.templates(), &params, config.parallelism)?;
                    let r = wordremoval::evaluate_exact_match(&preds, tasks)?;
                    say!(
                        "{label:>7} {split:<8} exact match {} (n={})",
                        format_percent(r.accuracy, r.se),
                        r.n
                    );
                    reports.push(HeldOutReport {
                        split,
                        policy: label.to_string(),
                        n: r.n,
                        accuracy: r.accuracy,
                        se: r.se,
                    });
                }
            }
            ilf_core::record::write_jsonl(&run_dir.join("eval.jsonl"), &reports)?;
        }
    }
    eprintln!(
        "done in {:.2}s; run directory {}",
        started.elapsed().as_secs_f64(),
        run_dir.display()
    );
    Ok(())
}

fn report_iterations(state: &ilf_core::ilf::IterationState, resumed_from: usize) -> Result<()> {
    if resumed_from > 0 {
        say!("resumed after iteration {resumed_from}");
    }
    for m in &state.metrics {
        say!(
            "iteration {}: {} context(s), {} record(s), mean selected score {:.4}, policy {}",
            m.iteration,
            m.contexts,
            m.records,
            m.mean_selected_score,
            m.policy_model_id
        );
    }
    Ok(())
}

fn load_sheets(path: &Path) -> Result<Vec<RankingSheet>> {
    let sheets: Vec<RankingSheet> = read_input(path)?;
    if sheets.is_empty() {
        return Err(usage(format!("{} holds no ranking sheets", path.display())));
    }
    Ok(sheets)
}

#[derive(Args, Debug)]
pub struct RankEvalArgs {
    /// rankings.jsonl, or `-` for stdin.
    rankings: PathBuf,
    /// Also report every method's win rate against this one.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    json: bool,
}

pub fn rank_eval(a: RankEvalArgs) -> Result<()> {
    let sheets = load_sheets(&a.rankings)?;
    let ranks = eval::mean_ranks(&sheets)?;
    let wins = match &a.reference {
        Some(reference) => ranks
            .iter()
            .filter(|r| &r.method != reference)
            .map(|r| Ok((r.method.clone(), eval::win_rate(&sheets, &r.method, reference)?)))
            .collect::<ilf_core::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    if a.json {
        return print_json(&serde_json::json!({ "mean_ranks": ranks, "win_rates": wins }));
    }
    let width = ranks.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    say!("{:<width$}  mean rank", "method");
    for r in &ranks {
        say!("{:<width$}  {:.2} ± {:.2} (n={})", r.method, r.mean, r.se, r.n);
    }
    if let Some(reference) = &a.reference {
        say!("win rate against {reference}:");
        for (method, w) in &wins {
            say!("{method:<width$}  {}", format_percent(w.p, w.se));
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct WinrateArgs {
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    /// rankings.jsonl, or `-` for stdin.
    rankings: PathBuf,
    #[arg(long)]
    json: bool,
}

pub fn winrate(a: WinrateArgs) -> Result<()> {
    let sheets = load_sheets(&a.rankings)?;
    let w = eval::win_rate(&sheets, &a.a, &a.b)?;
    if a.json {
        return print_json(&w);
    }
    say!("{}", format_percent(w.p, w.se));
    eprintln!(
        "{} vs {}: {} win(s), {} tie(s), {} loss(es) over {} item(s)",
        a.a, a.b, w.wins, w.ties, w.losses, w.n
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct KlArgs {
    /// Policy sampled from; same syntax as --backend.
    #[arg(long)]
    p: ilf_core::config::BackendSpec,
    /// Reference policy.
    #[arg(long)]
    q: ilf_core::config::BackendSpec,
    #[arg(long, default_value_t = eval::DEFAULT_KL_SAMPLES)]
    samples: usize,
    /// Tokens per sample.
    #[arg(long, default_value_t = eval::DEFAULT_KL_SAMPLE_LEN)]
    len: usize,
    /// Independent repetitions; the SE is then taken across runs.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    json: bool,
}

pub fn kl(g: &GlobalArgs, a: KlArgs) -> Result<()> {
    let config = g.run_config()?;
    let p = build_policy(&a.p, config.seed)?;
    let q = build_policy(&a.q, config.seed)?;
    let est = eval::estimate_kl_repeated(
        p.as_ref(),
        q.as_ref(),
        a.samples,
        a.len,
        config.seed,
        a.runs,
        config.parallelism,
    )?;
    if a.json {
        return print_json(&est);
    }
    say!("{:.4} ± {:.4} nats (n={})", est.kl_nats, est.sem, est.n_samples);
    Ok(())
}

/// Uses the global `--n` as the number of best-of-N candidates.
#[derive(Args, Debug)]
pub struct BonKlArgs {}

pub fn bon_kl(g: &GlobalArgs, _a: BonKlArgs) -> Result<()> {
    let n = g.n.ok_or_else(|| usage("bon-kl needs --n"))?;
    say!("{:.4}", eval::analytic_bon_kl(n as u64)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct RmEvalArgs {
    /// samples.jsonl whose records carry a comparison.
    #[arg(long)]
    pairs: PathBuf,
    /// binary or comparison.
    #[arg(long, default_value = "binary")]
    protocol: RmProtocol,
    #[arg(long)]
    json: bool,
}

pub fn rm_eval(g: &GlobalArgs, a: RmEvalArgs) -> Result<()> {
    let config = g.run_config()?;
    let pairs = load_samples(&a.pairs)?;
    let policy = build_policy(&config.backend, config.seed)?;
    let templates = TemplateSet::load(config.templates_dir.as_deref())?;
    let r = eval::rm_accuracy(policy.as_ref(), &templates, &pairs, a.protocol, config.parallelism)?;
    if a.json {
        return print_json(&r);
    }
    say!("accuracy {} (n={})", format_percent(r.accuracy, r.se), r.n);
    Ok(())
}

#[derive(Args, Debug)]
pub struct NllArgs {
    /// finetune.jsonl to evaluate.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    json: bool,
}

pub fn nll(g: &GlobalArgs, a: NllArgs) -> Result<()> {
    let config = g.run_config()?;
    let dataset = load_finetune_dataset(&a.dataset)?;
    let policy = build_policy(&config.backend, config.seed)?;
    let r = eval::dataset_nll(policy.as_ref(), &dataset, config.parallelism)?;
    if a.json {
        return print_json(&r);
    }
    say!("{:.4} ± {:.4} nats/token (n={})", r.mean_nll_per_token, r.se, r.n);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Overrides serve.port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

pub fn serve(g: &GlobalArgs, a: ServeArgs) -> Result<()> {
    let config = g.run_config()?;
    let run_dir = g.run_dir.clone().ok_or_else(|| usage("serve needs --run-dir"))?;
    std::fs::create_dir_all(&run_dir).map_err(|e| ilf_core::Error::io(&run_dir, e))?;
    let state = ilf_annotate::AppState::from_run_dir(&run_dir, &config.serve, config.sampling.max_tokens)?;
    let addr = SocketAddr::new(a.host, a.port.unwrap_or(config.serve.port));
    eprintln!("serving {} on http://{addr}", run_dir.display());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(ilf_annotate::serve(addr, state))
        .with_context(|| format!("annotation service on {addr}"))
}
