//! Annotation queue behind the annotation HTTP service.
//!
//! Tasks are handed out under time-limited leases. A submission completes its
//! task and is merged into the run's `samples.jsonl`; replaying an identical
//! submission is a no-op. Pending tasks live in `annotation_tasks.jsonl`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::record::{read_jsonl, write_jsonl, Comparison, FeedbackCategory, Preference, Sample};
use crate::tokenize::count_tokens;

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TASKS_FILE: &str = "annotation_tasks.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Comparison,
    Feedback,
    IdealSummary,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comparison" => Ok(TaskKind::Comparison),
            "feedback" => Ok(TaskKind::Feedback),
            "ideal_summary" => Ok(TaskKind::IdealSummary),
            other => Err(validation(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Leased,
    Done,
}

/// What an annotator sees: the parts of a sample relevant to the task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub sample_id: String,
    pub title: String,
    pub post: String,
    /// The summary to critique (feedback tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_b: Option<String>,
    /// Maximum token count of an ideal summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub payload: TaskPayload,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl AnnotationTask {
    pub fn feedback(sample: &Sample) -> Self {
        Self::new(
            format!("{}-feedback", sample.id),
            TaskKind::Feedback,
            TaskPayload {
                summary: Some(sample.initial_output.clone()),
                ..payload_of(sample)
            },
        )
    }

    pub fn ideal_summary(sample: &Sample, token_budget: usize) -> Self {
        Self::new(
            format!("{}-ideal", sample.id),
            TaskKind::IdealSummary,
            TaskPayload {
                token_budget: Some(token_budget),
                ..payload_of(sample)
            },
        )
    }

    pub fn comparison(sample: &Sample, summary_a: impl Into<String>, summary_b: impl Into<String>) -> Self {
        Self::new(
            format!("{}-comparison", sample.id),
            TaskKind::Comparison,
            TaskPayload {
                summary_a: Some(summary_a.into()),
                summary_b: Some(summary_b.into()),
                ..payload_of(sample)
            },
        )
    }

    fn new(task_id: String, kind: TaskKind, payload: TaskPayload) -> Self {
        AnnotationTask {
            task_id,
            kind,
            payload,
            status: TaskStatus::Open,
            annotation: None,
        }
    }
}

fn payload_of(sample: &Sample) -> TaskPayload {
    TaskPayload {
        sample_id: sample.id.clone(),
        title: sample.title.clone(),
        post: sample.post.clone(),
        summary: None,
        summary_a: None,
        summary_b: None,
        token_budget: None,
    }
}

/// A validated submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Annotation {
    Comparison {
        preferred: Preference,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotator_id: Option<String>,
    },
    Feedback {
        text: String,
        category: FeedbackCategory,
        more_feedback: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotator_id: Option<String>,
    },
    IdealSummary {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotator_id: Option<String>,
    },
}

#[derive(Debug, Deserialize)]
struct ComparisonBody {
    preferred: Preference,
    annotator_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    text: String,
    category: FeedbackCategory,
    more_feedback: bool,
    annotator_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct IdealBody {
    text: String,
    annotator_id: Option<String>,
}

/// Why a submission was refused; maps onto HTTP status codes.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("unknown task `{0}`")]
    NotFound(String),
    #[error("task `{0}` is not leased")]
    NotLeased(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("could not persist annotation: {0}")]
    Storage(String),
}

impl Annotation {
    /// Parses and validates a submission body for a task of `kind`.
    pub fn parse(kind: TaskKind, body: &serde_json::Value, token_budget: usize) -> Result<Self, SubmitError> {
        let bad = |e: serde_json::Error| SubmitError::Unprocessable(e.to_string());
        match kind {
            TaskKind::Comparison => {
                let b: ComparisonBody = serde_json::from_value(body.clone()).map_err(bad)?;
                Ok(Annotation::Comparison {
                    preferred: b.preferred,
                    annotator_id: b.annotator_id,
                })
            }
            TaskKind::Feedback => {
                let b: FeedbackBody = serde_json::from_value(body.clone()).map_err(bad)?;
                if b.text.trim().is_empty() {
                    return Err(SubmitError::Unprocessable("feedback text is empty".into()));
                }
                Ok(Annotation::Feedback {
                    text: b.text,
                    category: b.category,
                    more_feedback: b.more_feedback,
                    annotator_id: b.annotator_id,
                })
            }
            TaskKind::IdealSummary => {
                let b: IdealBody = serde_json::from_value(body.clone()).map_err(bad)?;
                if b.text.trim().is_empty() {
                    return Err(SubmitError::Unprocessable("ideal summary is empty".into()));
                }
                let tokens = count_tokens(&b.text);
                if tokens > token_budget {
                    return Err(SubmitError::Unprocessable(format!(
                        "ideal summary has {tokens} tokens, budget is {token_budget}"
                    )));
                }
                Ok(Annotation::IdealSummary {
                    text: b.text,
                    annotator_id: b.annotator_id,
                })
            }
        }
    }

    fn same_content(&self, other: &Annotation) -> bool {
        match (self, other) {
            (Annotation::Comparison { preferred: a, .. }, Annotation::Comparison { preferred: b, .. }) => a == b,
            (
                Annotation::Feedback {
                    text: a,
                    category: ca,
                    more_feedback: ma,
                    ..
                },
                Annotation::Feedback {
                    text: b,
                    category: cb,
                    more_feedback: mb,
                    ..
                },
            ) => a == b && ca == cb && ma == mb,
            (Annotation::IdealSummary { text: a, .. }, Annotation::IdealSummary { text: b, .. }) => a == b,
            _ => false,
        }
    }

    /// Writes the annotation into the matching sample fields.
    pub fn apply(&self, sample: &mut Sample, payload: &TaskPayload) {
        match self {
            Annotation::Comparison { preferred, .. } => {
                sample.comparison = Some(Comparison {
                    output_a: payload.summary_a.clone().unwrap_or_default(),
                    output_b: payload.summary_b.clone().unwrap_or_default(),
                    preferred: *preferred,
                });
            }
            Annotation::Feedback { text, category, .. } => {
                if let Some(summary) = &payload.summary {
                    sample.initial_output = summary.clone();
                }
                sample.feedback = text.clone();
                sample.feedback_category = *category;
            }
            Annotation::IdealSummary { text, .. } => sample.ideal_output = Some(text.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    Recorded,
    /// Identical to the stored annotation; nothing changed.
    Replayed,
}

struct QueueState {
    tasks: Vec<AnnotationTask>,
    index: HashMap<String, usize>,
    leases: HashMap<String, Instant>,
}

/// Lease-based task queue persisting into a run directory.
pub struct AnnotationQueue {
    state: Mutex<QueueState>,
    run_dir: Option<PathBuf>,
    lease: Duration,
    token_budget: usize,
}

impl AnnotationQueue {
    pub fn new(
        tasks: Vec<AnnotationTask>,
        run_dir: Option<PathBuf>,
        lease: Duration,
        token_budget: usize,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.task_id.clone(), i).is_some() {
                return Err(validation(format!("duplicate task id `{}`", t.task_id)));
            }
        }
        let tasks = tasks
            .into_iter()
            .map(|mut t| {
                // leases do not survive a restart
                if t.status == TaskStatus::Leased {
                    t.status = TaskStatus::Open;
                }
                t
            })
            .collect();
        Ok(AnnotationQueue {
            state: Mutex::new(QueueState {
                tasks,
                index,
                leases: HashMap::new(),
            }),
            run_dir,
            lease,
            token_budget,
        })
    }

    /// Loads `annotation_tasks.jsonl` from `run_dir` when present; otherwise
    /// queues a feedback task for every sample in `samples.jsonl` that has an
    /// initial output but no feedback.
    pub fn from_run_dir(run_dir: &Path, lease: Duration, token_budget: usize) -> Result<Self> {
        let tasks_path = run_dir.join(TASKS_FILE);
        let tasks = if tasks_path.exists() {
            read_jsonl(&tasks_path)?
        } else {
            let samples_path = run_dir.join(SAMPLES_FILE);
            let samples: Vec<Sample> = if samples_path.exists() {
                read_jsonl(&samples_path)?
            } else {
                Vec::new()
            };
            samples
                .iter()
                .filter(|s| s.feedback.trim().is_empty())
                .map(AnnotationTask::feedback)
                .collect()
        };
        Self::new(tasks, Some(run_dir.to_path_buf()), lease, token_budget)
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    pub fn snapshot(&self) -> Vec<AnnotationTask> {
        self.state.lock().tasks.clone()
    }

    /// Picks up tasks appended to the tasks file by another process (an ILF
    /// run waiting for feedback) since the queue was loaded.
    fn refresh(&self, state: &mut QueueState) {
        let Some(dir) = &self.run_dir else { return };
        let path = dir.join(TASKS_FILE);
        if !path.exists() {
            return;
        }
        let Ok(on_disk) = read_jsonl::<AnnotationTask>(&path) else {
            return;
        };
        for mut task in on_disk {
            match state.index.get(&task.task_id) {
                Some(&i) => {
                    // the waiting run re-opened the task with a new payload
                    if task.status == TaskStatus::Open && state.tasks[i].payload != task.payload {
                        state.tasks[i] = task;
                        state.leases.remove(&state.tasks[i].task_id);
                    }
                }
                None => {
                    if task.status == TaskStatus::Leased {
                        task.status = TaskStatus::Open;
                    }
                    state.index.insert(task.task_id.clone(), state.tasks.len());
                    state.tasks.push(task);
                }
            }
        }
    }

    /// Leases the first open task of `kind` (or one whose lease ran out).
    pub fn lease_next(&self, kind: TaskKind) -> Option<AnnotationTask> {
        let now = Instant::now();
        let mut state = self.state.lock();
        self.refresh(&mut state);
        let QueueState { tasks, leases, .. } = &mut *state;
        let task = tasks.iter_mut().find(|t| {
            t.kind == kind
                && match t.status {
                    TaskStatus::Open => true,
                    TaskStatus::Leased => leases.get(&t.task_id).is_none_or(|&until| until <= now),
                    TaskStatus::Done => false,
                }
        })?;
        task.status = TaskStatus::Leased;
        leases.insert(task.task_id.clone(), now + self.lease);
        Some(task.clone())
    }

    /// Extends the lease of a leased task by the full lease duration.
    pub fn renew(&self, task_id: &str) -> Result<(), SubmitError> {
        let mut state = self.state.lock();
        let i = *state
            .index
            .get(task_id)
            .ok_or_else(|| SubmitError::NotFound(task_id.to_string()))?;
        if state.tasks[i].status != TaskStatus::Leased {
            return Err(SubmitError::NotLeased(task_id.to_string()));
        }
        state.leases.insert(task_id.to_string(), Instant::now() + self.lease);
        Ok(())
    }

    pub fn submit(&self, task_id: &str, body: &serde_json::Value) -> Result<SubmitOutcome, SubmitError> {
        let mut state = self.state.lock();
        self.refresh(&mut state);
        let i = *state
            .index
            .get(task_id)
            .ok_or_else(|| SubmitError::NotFound(task_id.to_string()))?;
        let task = &state.tasks[i];
        let annotation = Annotation::parse(task.kind, body, self.token_budget)?;
        match task.status {
            TaskStatus::Open => return Err(SubmitError::NotLeased(task_id.to_string())),
            TaskStatus::Done => {
                return match &task.annotation {
                    Some(prev) if prev.same_content(&annotation) => Ok(SubmitOutcome::Replayed),
                    _ => Err(SubmitError::NotLeased(task_id.to_string())),
                };
            }
            TaskStatus::Leased => {}
        }
        if let Some(dir) = &self.run_dir {
            persist_annotation(dir, task, &annotation).map_err(|e| SubmitError::Storage(e.to_string()))?;
        }
        let task = &mut state.tasks[i];
        task.status = TaskStatus::Done;
        task.annotation = Some(annotation);
        state.leases.remove(task_id);
        if let Some(dir) = &self.run_dir {
            write_jsonl(&dir.join(TASKS_FILE), &state.tasks).map_err(|e| SubmitError::Storage(e.to_string()))?;
        }
        Ok(SubmitOutcome::Recorded)
    }
}

/// Upserts the annotated sample into `samples.jsonl`.
fn persist_annotation(dir: &Path, task: &AnnotationTask, annotation: &Annotation) -> Result<()> {
    let path = dir.join(SAMPLES_FILE);
    let mut samples: Vec<Sample> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
    let p = &task.payload;
    let i = match samples.iter().position(|s| s.id == p.sample_id) {
        Some(i) => i,
        None => {
            samples.push(Sample::context(&p.sample_id, &p.title, &p.post));
            samples.len() - 1
        }
    };
    annotation.apply(&mut samples[i], p);
    write_jsonl(&path, &samples)
}
