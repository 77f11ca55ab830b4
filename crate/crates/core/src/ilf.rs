//! The feedback-driven training loop, run for `K` iterations.
//!
//! Each iteration samples an initial output per context from the current
//! policy, collects feedback, samples `N` refinements from the refinement
//! policy, selects among them, writes a finetuning dataset and trains the next
//! policy. A run directory holds:
//!
//! ```text
//! run.toml                    config snapshot
//! state.jsonl                 one IterationState per completed iteration
//! iter_k/samples.jsonl        contexts with initial output and feedback
//! iter_k/refinements.jsonl    scored candidates
//! iter_k/finetune.jsonl       the dataset D_k
//! iter_k/metrics.jsonl
//! ```
//!
//! An aborted iteration leaves `*.partial.jsonl` files and no state line, so
//! rerunning the same command resumes at that iteration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotationTask, TaskStatus, SAMPLES_FILE, TASKS_FILE};
use crate::backend::http::HttpClient;
use crate::backend::{self, build_policy, HttpBackend, ImitationPolicy, Policy, PolicyHandle};
use crate::config::{
    BackendSpec, Beta, FeedbackSpec, FinetuneMode, FinetuneSpec, HttpConfig, RunConfig, SamplingParams,
};
use crate::error::{precondition, validation, Error, Result};
use crate::parallel::ordered_try_map;
use crate::record::{
    load_finetune_dataset, read_jsonl, write_finetune_dataset, write_jsonl, write_refinements, write_samples,
    FinetuneRecord, RefinementSet, Sample,
};
use crate::refine::{generate_refinements, postprocess, PromptValues, TemplateName, TemplateSet};
use crate::rng;
use crate::select::{HttpEmbedder, Scorer};
use crate::wordremoval::{build_removal_prompt, removal_instruction, RemovalTask};

pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const STATE_FILE: &str = "state.jsonl";

/// One context `c`. Word-removal contexts carry their task, whose
/// instruction is part of the context prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub sample: Sample,
    pub removal: Option<RemovalTask>,
}

impl Context {
    pub fn summarization(sample: Sample) -> Self {
        Context { sample, removal: None }
    }

    pub fn word_removal(task: RemovalTask) -> Self {
        Context {
            sample: Sample::context(&task.id, &task.id, &task.sentence),
            removal: Some(task),
        }
    }

    pub fn id(&self) -> &str {
        &self.sample.id
    }

    /// Prompt `c` the trained policy answers.
    pub fn prompt(&self, templates: &TemplateSet) -> Result<String> {
        match &self.removal {
            Some(task) => build_removal_prompt(task, templates),
            None => templates.render(TemplateName::InitialSummary, &PromptValues::from_sample(&self.sample)),
        }
    }

    /// Prompt of the finetuning record built from this context.
    pub fn finetune_prompt(&self, templates: &TemplateSet) -> Result<String> {
        match &self.removal {
            Some(task) => build_removal_prompt(task, templates),
            None => templates.render(
                TemplateName::FinetuneSummaries,
                &PromptValues::from_sample(&self.sample),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    File,
    OracleWordRemoval,
    AnnotationQueue,
}

pub trait FeedbackProvider: Send + Sync {
    fn kind(&self) -> FeedbackKind;

    /// Feedback on each sample's initial output, aligned with `samples`. The
    /// outer error rejects the whole batch; inner errors are per sample.
    fn collect(&self, iteration: usize, contexts: &[Context], samples: &[Sample]) -> Result<Vec<Result<String>>>;
}

/// Feedback already stored in the samples.
pub struct FileFeedback;

impl FeedbackProvider for FileFeedback {
    fn kind(&self) -> FeedbackKind {
        FeedbackKind::File
    }

    fn collect(&self, _iteration: usize, _contexts: &[Context], samples: &[Sample]) -> Result<Vec<Result<String>>> {
        if let Some(s) = samples.iter().find(|s| s.feedback.trim().is_empty()) {
            return Err(validation(format!(
                "sample `{}` has no feedback in the input file",
                s.id
            )));
        }
        Ok(samples.iter().map(|s| Ok(s.feedback.clone())).collect())
    }
}

/// Asks for exactly the words the task wants removed.
pub struct OracleWordRemovalFeedback;

impl FeedbackProvider for OracleWordRemovalFeedback {
    fn kind(&self) -> FeedbackKind {
        FeedbackKind::OracleWordRemoval
    }

    fn collect(&self, _iteration: usize, contexts: &[Context], _samples: &[Sample]) -> Result<Vec<Result<String>>> {
        contexts
            .iter()
            .map(|c| match &c.removal {
                Some(task) => Ok(Ok(removal_instruction(&task.remove_words))),
                None => Err(validation(format!("context `{}` is not a word-removal task", c.id()))),
            })
            .collect()
    }
}

/// Publishes feedback tasks into the run directory and waits until the
/// annotation service has stored feedback for every sample.
pub struct AnnotationQueueFeedback {
    run_dir: PathBuf,
    timeout: Duration,
    poll: Duration,
}

impl AnnotationQueueFeedback {
    pub fn new(run_dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        AnnotationQueueFeedback {
            run_dir: run_dir.into(),
            timeout,
            poll: Duration::from_millis(50),
        }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    fn answered(&self, samples: &[Sample]) -> Result<Vec<Option<String>>> {
        let path = self.run_dir.join(SAMPLES_FILE);
        let stored: Vec<Sample> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        Ok(samples
            .iter()
            .map(|s| {
                stored
                    .iter()
                    .find(|t| t.id == s.id && t.initial_output == s.initial_output && !t.feedback.trim().is_empty())
                    .map(|t| t.feedback.clone())
            })
            .collect())
    }

    fn publish(&self, samples: &[Sample], answered: &[Option<String>]) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let samples_path = self.run_dir.join(SAMPLES_FILE);
        let mut stored: Vec<Sample> = if samples_path.exists() {
            read_jsonl(&samples_path)?
        } else {
            Vec::new()
        };
        let tasks_path = self.run_dir.join(TASKS_FILE);
        let mut tasks: Vec<AnnotationTask> = if tasks_path.exists() {
            read_jsonl(&tasks_path)?
        } else {
            Vec::new()
        };
        for (s, a) in samples.iter().zip(answered) {
            if a.is_some() {
                continue;
            }
            let mut pending = s.clone();
            pending.feedback.clear();
            match stored.iter_mut().find(|t| t.id == s.id) {
                Some(t) => *t = pending,
                None => stored.push(pending),
            }
            let task = AnnotationTask::feedback(s);
            match tasks.iter_mut().find(|t| t.task_id == task.task_id) {
                Some(t) if t.payload == task.payload && t.status != TaskStatus::Done => {}
                Some(t) => *t = task,
                None => tasks.push(task),
            }
        }
        write_jsonl(&samples_path, &stored)?;
        write_jsonl(&tasks_path, &tasks)
    }
}

impl FeedbackProvider for AnnotationQueueFeedback {
    fn kind(&self) -> FeedbackKind {
        FeedbackKind::AnnotationQueue
    }

    fn collect(&self, _iteration: usize, _contexts: &[Context], samples: &[Sample]) -> Result<Vec<Result<String>>> {
        let deadline = Instant::now() + self.timeout;
        let mut answered = self.answered(samples)?;
        if answered.iter().any(Option::is_none) {
            self.publish(samples, &answered)?;
        }
        loop {
            if answered.iter().all(Option::is_some) {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            std::thread::sleep(self.poll.min(deadline - now));
            answered = self.answered(samples)?;
        }
        Ok(samples
            .iter()
            .zip(answered)
            .map(|(s, a)| {
                a.ok_or_else(|| Error::FeedbackTimeout {
                    sample_id: s.id.clone(),
                })
            })
            .collect())
    }
}

pub trait FinetuneBackend: Send + Sync {
    /// Trains a new policy from `base` on `records`.
    fn train(&self, base: &Policy, records: &[FinetuneRecord], lambda: f64) -> Result<Policy>;

    /// Re-attaches to a policy trained in an earlier process. `None` means
    /// the policy is rebuilt by replaying training.
    fn restore(&self, _handle: &PolicyHandle) -> Option<Result<Policy>> {
        None
    }
}

/// In-process imitation: the trained policy memorises its dataset. The
/// prompt-loss weight has no effect and is only recorded.
pub struct ImitationFinetuner;

impl FinetuneBackend for ImitationFinetuner {
    fn train(&self, base: &Policy, records: &[FinetuneRecord], _lambda: f64) -> Result<Policy> {
        Ok(Arc::new(ImitationPolicy::train(base.clone(), records)))
    }
}

/// Finetune jobs on a remote service.
///
/// `POST {base_url}/v1/fine-tunes` with `{model, training_records:
/// [{prompt, completion, weight}], prompt_loss_weight, suffix}` returns a
/// job `{id, status}`; `GET {base_url}/v1/fine-tunes/{id}` is polled until
/// `status` is `succeeded` (reading `fine_tuned_model`) or `failed`.
/// Completions are sent with a leading space separating them from the prompt.
pub struct HttpFinetuner {
    client: HttpClient,
    inference: HttpConfig,
    poll: Duration,
    max_polls: u32,
}

#[derive(Serialize)]
struct FinetuneRequest<'a> {
    model: &'a str,
    training_records: Vec<TrainingRecord<'a>>,
    prompt_loss_weight: f64,
    suffix: &'a str,
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    prompt: &'a str,
    completion: String,
    weight: f64,
}

#[derive(Debug, Deserialize)]
struct FinetuneJob {
    id: String,
    status: String,
    #[serde(default)]
    fine_tuned_model: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

impl HttpFinetuner {
    pub fn new(service: HttpConfig, inference: HttpConfig, poll: Duration, max_polls: u32) -> Result<Self> {
        Ok(HttpFinetuner {
            client: HttpClient::new(service)?,
            inference,
            poll,
            max_polls,
        })
    }

    fn attach(&self, model: &str) -> Result<Policy> {
        let mut config = self.inference.clone();
        config.model = model.to_string();
        Ok(Arc::new(HttpBackend::new(config)?))
    }
}

impl FinetuneBackend for HttpFinetuner {
    fn train(&self, base: &Policy, records: &[FinetuneRecord], lambda: f64) -> Result<Policy> {
        let request = FinetuneRequest {
            model: &base.handle().model_id,
            training_records: records
                .iter()
                .map(|r| TrainingRecord {
                    prompt: &r.prompt,
                    completion: if r.completion.starts_with(char::is_whitespace) {
                        r.completion.clone()
                    } else {
                        format!(" {}", r.completion)
                    },
                    weight: r.weight,
                })
                .collect(),
            prompt_loss_weight: lambda,
            suffix: "ilf",
        };
        let job: FinetuneJob = self
            .client
            .post_json("/v1/fine-tunes", &request)
            .map_err(|e| Error::Finetune {
                job_id: None,
                message: e.to_string(),
            })?;
        let job_id = job.id.clone();
        let fail = |message: String| Error::Finetune {
            job_id: Some(job_id.clone()),
            message,
        };
        let mut current = job.status.clone();
        let mut latest = job;
        for _ in 0..=self.max_polls {
            match current.as_str() {
                "succeeded" => {
                    let model = latest
                        .fine_tuned_model
                        .clone()
                        .ok_or_else(|| fail("job succeeded without a model name".into()))?;
                    return self.attach(&model);
                }
                "failed" | "cancelled" => {
                    return Err(fail(latest.error.clone().unwrap_or_else(|| format!("job {current}"))));
                }
                _ => {}
            }
            std::thread::sleep(self.poll);
            latest = self
                .client
                .get_json(&format!("/v1/fine-tunes/{job_id}"))
                .map_err(|e| fail(e.to_string()))?;
            current = latest.status.clone();
        }
        Err(fail(format!("job still `{current}` after {} polls", self.max_polls)))
    }

    fn restore(&self, handle: &PolicyHandle) -> Option<Result<Policy>> {
        (handle.backend_kind == backend::BackendKind::Http).then(|| self.attach(&handle.model_id))
    }
}

/// Trains the next policy: `continuous` from `base` on the newest dataset,
/// `from_scratch_concat` from `root` on all datasets concatenated, and
/// `emit_only` returns `base` untouched.
pub fn finetune(
    finetuner: &dyn FinetuneBackend,
    base: &Policy,
    root: &Policy,
    datasets: &[PathBuf],
    mode: FinetuneMode,
    lambda: f64,
) -> Result<Policy> {
    if mode == FinetuneMode::EmitOnly {
        return Ok(base.clone());
    }
    let Some(newest) = datasets.last() else {
        return Err(precondition("finetuning needs at least one dataset"));
    };
    match mode {
        FinetuneMode::Continuous => finetuner.train(base, &load_finetune_dataset(newest)?, lambda),
        FinetuneMode::FromScratchConcat => {
            let mut all = Vec::new();
            for path in datasets {
                all.extend(load_finetune_dataset(path)?);
            }
            finetuner.train(root, &all, lambda)
        }
        FinetuneMode::EmitOnly => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub contexts: usize,
    pub records: usize,
    pub mean_selected_score: f64,
    /// Candidates that post-processed to nothing.
    pub empty_candidates: usize,
    pub mode: FinetuneMode,
    /// Prompt-loss weight requested for this iteration's finetune.
    pub lambda: f64,
    pub policy_model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    /// Completed iterations.
    pub iteration: usize,
    pub policy: PolicyHandle,
    /// D_1..D_k, relative to the run directory.
    pub datasets: Vec<PathBuf>,
    pub metrics: Vec<IterationMetrics>,
    /// Training stages behind `policy`, oldest first; each lists the
    /// iterations whose datasets that stage trained on.
    pub provenance: Vec<Vec<usize>>,
}

impl IterationState {
    pub fn initial(policy: PolicyHandle) -> Self {
        IterationState {
            iteration: 0,
            policy,
            datasets: Vec::new(),
            metrics: Vec::new(),
            provenance: Vec::new(),
        }
    }
}

pub fn load_state(run_dir: &Path) -> Result<Vec<IterationState>> {
    let path = run_dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let states: Vec<IterationState> = read_jsonl(&path)?;
    for (i, s) in states.iter().enumerate() {
        if s.iteration != i + 1 || s.datasets.len() != s.iteration {
            return Err(validation(format!(
                "{} is inconsistent at line {}",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(states)
}

/// For `beta = infinity` runs: record `i` must carry the selected candidate
/// of refinement set `i`.
pub fn check_selection_consistency(sets: &[RefinementSet], records: &[FinetuneRecord]) -> Result<()> {
    if sets.len() != records.len() {
        return Err(validation(format!(
            "{} refinement set(s) but {} finetune record(s)",
            sets.len(),
            records.len()
        )));
    }
    for (set, record) in sets.iter().zip(records) {
        set.validate()?;
        if set.selected() != Some(record.completion.as_str()) {
            return Err(validation(format!(
                "finetune record for `{}` is not the selected refinement",
                set.sample_id
            )));
        }
    }
    Ok(())
}

/// Scorer described by `config`: its kind, the policy it queries and, for
/// embedding similarity, the remote embedder when one is configured.
pub fn build_scorer(config: &RunConfig, templates: &TemplateSet) -> Result<Scorer> {
    let policy = if config.scorer.needs_policy() {
        Some(build_policy(config.scorer_backend(), config.seed)?)
    } else {
        None
    };
    let mut scorer =
        Scorer::new(config.scorer, policy, templates.clone(), config.seed)?.with_parallelism(config.parallelism);
    if let Some(embedding) = &config.embedding {
        scorer = scorer.with_embedder(Arc::new(HttpEmbedder::new(embedding.clone())?));
    }
    Ok(scorer)
}

/// Records contributed by one scored refinement set: the selected candidate
/// with weight 1 when `beta` is infinite, otherwise every non-empty
/// candidate with positive weight, carrying that weight.
pub fn finetune_records(prompt: &str, set: &RefinementSet, beta: Beta) -> Vec<FinetuneRecord> {
    match beta {
        Beta::Infinity => set
            .selected()
            .map(|c| vec![FinetuneRecord::new(prompt, c)])
            .unwrap_or_default(),
        Beta::Finite(_) => set
            .candidates
            .iter()
            .zip(&set.weights)
            .filter(|(c, w)| **w > 0.0 && !c.trim().is_empty())
            .map(|(c, w)| FinetuneRecord::weighted(prompt, c.as_str(), w.min(1.0)))
            .collect(),
    }
}

impl std::fmt::Debug for IlfOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IlfOutcome")
            .field("state", &self.state)
            .field("policy", self.policy.handle())
            .field("resumed_from", &self.resumed_from)
            .finish()
    }
}

pub struct IlfOutcome {
    pub state: IterationState,
    pub policy: Policy,
    /// Iterations already complete when the run started.
    pub resumed_from: usize,
}

struct ContextResult {
    set: RefinementSet,
    records: Vec<FinetuneRecord>,
    sample: Sample,
}

/// A configured ILF run bound to a run directory.
pub struct Ilf {
    config: RunConfig,
    run_dir: PathBuf,
    templates: TemplateSet,
    root: Policy,
    refiner: Policy,
    scorer: Scorer,
    feedback: Box<dyn FeedbackProvider>,
    finetuner: Box<dyn FinetuneBackend>,
}

impl Ilf {
    pub fn from_config(config: RunConfig, run_dir: &Path) -> Result<Self> {
        config.validate()?;
        let templates = TemplateSet::load(config.templates_dir.as_deref())?;
        let root = build_policy(&config.backend, config.seed)?;
        let refiner = build_policy(config.refine_backend(), config.seed)?;
        let scorer = build_scorer(&config, &templates)?.with_parallelism(1);
        let feedback: Box<dyn FeedbackProvider> = match &config.feedback {
            FeedbackSpec::File => Box::new(FileFeedback),
            FeedbackSpec::OracleWordRemoval => Box::new(OracleWordRemovalFeedback),
            FeedbackSpec::AnnotationQueue { timeout_ms } => Box::new(AnnotationQueueFeedback::new(
                run_dir,
                Duration::from_millis(*timeout_ms),
            )),
        };
        let finetuner: Box<dyn FinetuneBackend> = match &config.finetune {
            FinetuneSpec::Imitation => Box::new(ImitationFinetuner),
            FinetuneSpec::Http {
                http,
                poll_ms,
                max_polls,
            } => {
                let inference = match &config.backend {
                    BackendSpec::Http(c) => c.clone(),
                    _ => http.clone(),
                };
                Box::new(HttpFinetuner::new(
                    http.clone(),
                    inference,
                    Duration::from_millis(*poll_ms),
                    *max_polls,
                )?)
            }
        };
        Ok(Ilf {
            config,
            run_dir: run_dir.to_path_buf(),
            templates,
            root,
            refiner,
            scorer,
            feedback,
            finetuner,
        })
    }

    pub fn with_root(mut self, root: Policy) -> Self {
        self.root = root;
        self
    }

    pub fn with_refiner(mut self, refiner: Policy) -> Self {
        self.refiner = refiner;
        self
    }

    pub fn with_scorer(mut self, scorer: Scorer) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn with_feedback(mut self, feedback: Box<dyn FeedbackProvider>) -> Self {
        self.feedback = feedback;
        self
    }

    pub fn with_finetuner(mut self, finetuner: Box<dyn FinetuneBackend>) -> Self {
        self.finetuner = finetuner;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn root(&self) -> &Policy {
        &self.root
    }

    pub fn initial_state(&self) -> IterationState {
        IterationState::initial(self.root.handle().clone())
    }

    fn params(&self, iteration: usize, id: &str, purpose: &str) -> SamplingParams {
        let seed = rng::derive_seed(
            self.config.seed,
            "sampling",
            &[&(iteration as u64).to_le_bytes(), id.as_bytes(), purpose.as_bytes()],
        );
        self.config.sampling.with_seed(seed)
    }

    fn refine_template(&self, context: &Context) -> TemplateName {
        if context.removal.is_some() {
            TemplateName::WordRemoval
        } else if self.config.refine_without_feedback {
            TemplateName::RefineWithoutFeedback
        } else {
            TemplateName::RefineWithFeedback
        }
    }

    fn initial_output(&self, iteration: usize, policy: &Policy, context: &Context) -> Result<Sample> {
        let mut sample = context.sample.clone();
        if sample.initial_output.is_empty() {
            let prompt = context.prompt(&self.templates)?;
            let params = self.params(iteration, context.id(), "initial");
            let raw = backend::generate(policy.as_ref(), &prompt, &params, 1)?;
            sample.initial_output = postprocess(&raw[0], params.max_tokens);
        }
        Ok(sample)
    }

    fn refine_and_select(
        &self,
        iteration: usize,
        context: &Context,
        mut sample: Sample,
        feedback: &Result<String>,
    ) -> Result<ContextResult> {
        match feedback {
            Ok(f) => sample.feedback = f.clone(),
            Err(e) => {
                return Err(match e {
                    Error::FeedbackTimeout { sample_id } => Error::FeedbackTimeout {
                        sample_id: sample_id.clone(),
                    },
                    other => validation(other.to_string()),
                })
            }
        }
        let template = self.templates.get(self.refine_template(context));
        let params = self.params(iteration, context.id(), "refine");
        let set = generate_refinements(self.refiner.as_ref(), template, &sample, self.config.n, &params)?;
        let set = self.scorer.select(&sample, set, self.config.beta)?;
        let records = finetune_records(&context.finetune_prompt(&self.templates)?, &set, self.config.beta);
        Ok(ContextResult { set, records, sample })
    }

    fn iter_dir(&self, iteration: usize) -> PathBuf {
        self.run_dir.join(format!("iter_{iteration}"))
    }

    /// One pass of the loop over `contexts`, returning the next state and policy.
    pub fn run_iteration(
        &self,
        state: &IterationState,
        policy: &Policy,
        contexts: &[Context],
    ) -> Result<(IterationState, Policy)> {
        if contexts.is_empty() {
            return Err(precondition("an iteration needs at least one context"));
        }
        let k = state.iteration + 1;
        let dir = self.iter_dir(k);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for stale in ["refinements.partial.jsonl", "finetune.partial.jsonl"] {
            let _ = fs::remove_file(dir.join(stale));
        }
        let abort = |completed: &[ContextResult], cause: Error| -> Error {
            let partial = dir.join("finetune.partial.jsonl");
            let sets: Vec<RefinementSet> = completed.iter().map(|r| r.set.clone()).collect();
            let records: Vec<FinetuneRecord> = completed.iter().flat_map(|r| r.records.clone()).collect();
            let written = write_jsonl(&dir.join("refinements.partial.jsonl"), &sets)
                .and_then(|_| write_jsonl(&partial, &records));
            if let Err(e) = written {
                tracing::error!(error = %e, "could not persist partial iteration data");
            }
            Error::Aborted {
                iteration: k,
                completed: completed.len(),
                partial,
                cause: Box::new(cause),
            }
        };

        let parallelism = self.config.parallelism;
        let (samples, err) = ordered_try_map(contexts, parallelism, |_, c| self.initial_output(k, policy, c));
        if let Some(e) = err {
            return Err(abort(&[], e));
        }
        let feedback = self
            .feedback
            .collect(k, contexts, &samples)
            .map_err(|e| abort(&[], e))?;
        if feedback.len() != contexts.len() {
            return Err(abort(
                &[],
                validation("feedback provider returned the wrong number of entries"),
            ));
        }
        let work: Vec<(&Context, &Sample, &Result<String>)> = contexts
            .iter()
            .zip(&samples)
            .zip(&feedback)
            .map(|((c, s), f)| (c, s, f))
            .collect();
        let (done, err) = ordered_try_map(&work, parallelism, |_, (c, s, f)| {
            self.refine_and_select(k, c, (*s).clone(), f)
        });
        if let Some(e) = err {
            return Err(abort(&done, e));
        }

        let sets: Vec<RefinementSet> = done.iter().map(|r| r.set.clone()).collect();
        let records: Vec<FinetuneRecord> = done.iter().flat_map(|r| r.records.clone()).collect();
        let with_feedback: Vec<Sample> = done.iter().map(|r| r.sample.clone()).collect();
        write_samples(&dir.join("samples.jsonl"), &with_feedback)?;
        write_refinements(&dir.join("refinements.jsonl"), &sets)?;
        let dataset = dir.join("finetune.jsonl");
        write_finetune_dataset(&records, &dataset)?;

        let mut datasets = state.datasets.clone();
        datasets.push(PathBuf::from(format!("iter_{k}")).join("finetune.jsonl"));
        let next_policy = self.finetune_step(policy, &datasets)?;

        let selected: Vec<f64> = sets
            .iter()
            .filter_map(|s| s.selected_index.map(|i| s.scores[i]))
            .collect();
        let metrics = IterationMetrics {
            iteration: k,
            contexts: contexts.len(),
            records: records.len(),
            mean_selected_score: selected.iter().sum::<f64>() / selected.len().max(1) as f64,
            empty_candidates: sets
                .iter()
                .map(|s| s.candidates.iter().filter(|c| c.is_empty()).count())
                .sum(),
            mode: self.config.finetune_mode,
            lambda: self.config.lambda,
            policy_model_id: next_policy.handle().model_id.clone(),
        };
        write_jsonl(&dir.join("metrics.jsonl"), std::slice::from_ref(&metrics))?;

        let mut provenance = state.provenance.clone();
        match self.config.finetune_mode {
            FinetuneMode::Continuous => provenance.push(vec![k]),
            FinetuneMode::FromScratchConcat => provenance = vec![(1..=k).collect()],
            FinetuneMode::EmitOnly => {}
        }
        let mut all_metrics = state.metrics.clone();
        all_metrics.push(metrics);
        let next = IterationState {
            iteration: k,
            policy: next_policy.handle().clone(),
            datasets,
            metrics: all_metrics,
            provenance,
        };
        Ok((next, next_policy))
    }

    fn finetune_step(&self, policy: &Policy, datasets: &[PathBuf]) -> Result<Policy> {
        let absolute: Vec<PathBuf> = datasets.iter().map(|d| self.run_dir.join(d)).collect();
        finetune(
            self.finetuner.as_ref(),
            policy,
            &self.root,
            &absolute,
            self.config.finetune_mode,
            self.config.lambda,
        )
    }

    /// Rebuilds the policy recorded in `state`.
    fn restore(&self, states: &[IterationState]) -> Result<Policy> {
        let Some(last) = states.last() else {
            return Ok(self.root.clone());
        };
        if let Some(policy) = self.finetuner.restore(&last.policy) {
            return policy;
        }
        let mut policy = self.root.clone();
        for state in states {
            policy = self.finetune_step(&policy, &state.datasets)?;
            if policy.handle().model_id != state.policy.model_id {
                return Err(Error::Config(format!(
                    "replaying iteration {} produced policy `{}`, expected `{}`",
                    state.iteration,
                    policy.handle().model_id,
                    state.policy.model_id
                )));
            }
        }
        Ok(policy)
    }

    fn check_config_snapshot(&self) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let path = self.run_dir.join(RUN_CONFIG_FILE);
        let snapshot = self.config.to_toml()?;
        if path.exists() {
            let existing = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if existing != snapshot {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration; use a fresh run directory",
                    path.display()
                )));
            }
            return Ok(());
        }
        fs::write(&path, snapshot).map_err(|e| Error::io(&path, e))
    }

    /// Runs iteration `k` on `partitions[k - 1]` for every iteration not yet
    /// recorded in the run directory.
    pub fn run(&self, partitions: &[Vec<Context>]) -> Result<IlfOutcome> {
        if partitions.is_empty() || partitions.iter().any(Vec::is_empty) {
            return Err(precondition("every iteration needs at least one context"));
        }
        self.check_config_snapshot()?;
        let states = load_state(&self.run_dir)?;
        let resumed_from = states.len();
        if resumed_from > partitions.len() {
            return Err(precondition(format!(
                "run directory already holds {resumed_from} iteration(s), more than the {} requested",
                partitions.len()
            )));
        }
        let mut policy = self.restore(&states)?;
        let mut state = states.last().cloned().unwrap_or_else(|| self.initial_state());
        for contexts in &partitions[resumed_from..] {
            let (next, next_policy) = self.run_iteration(&state, &policy, contexts)?;
            append_state(&self.run_dir, &next)?;
            state = next;
            policy = next_policy;
        }
        Ok(IlfOutcome {
            state,
            policy,
            resumed_from,
        })
    }
}

fn append_state(run_dir: &Path, state: &IterationState) -> Result<()> {
    let mut states = load_state(run_dir)?;
    states.push(state.clone());
    write_jsonl(&run_dir.join(STATE_FILE), &states)
}
