use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("template `{template}` is missing a value for placeholder `{{{placeholder}}}`")]
    Template { template: String, placeholder: String },

    #[error("backend `{model}` failed after {attempts} attempt(s): {message}")]
    Backend {
        model: String,
        attempts: u32,
        message: String,
    },

    #[error("no scripted fixture for prompt (sha256 {prompt_hash})")]
    FixtureMiss { prompt_hash: String },

    #[error("backend `{model}` does not support {capability}")]
    Capability { model: String, capability: String },

    #[error("degenerate label probe: neither `{good}` nor `{bad}` has non-zero probability")]
    DegenerateProbe { good: String, bad: String },

    #[error("cosine similarity undefined for a zero embedding vector")]
    UndefinedSimilarity,

    #[error("ensemble scoring failed for prompt(s) {failed:?}: {first}")]
    Ensemble { failed: Vec<u8>, first: Box<Error> },

    #[error("finetune failed{}: {message}", job_id.as_deref().map(|id| format!(" (job {id})")).unwrap_or_default())]
    Finetune { job_id: Option<String>, message: String },

    #[error("feedback provider timed out for sample `{sample_id}`")]
    FeedbackTimeout { sample_id: String },

    #[error(
        "iteration {iteration} aborted after {completed} record(s); partial data in {}; rerun to resume: {cause}",
        partial.display()
    )]
    Aborted {
        iteration: usize,
        completed: usize,
        partial: PathBuf,
        cause: Box<Error>,
    },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than by a failing backend or
    /// filesystem; the CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Precondition(_)
            | Error::Template { .. }
            | Error::UnknownMethod(_)
            | Error::Config(_) => true,
            Error::Aborted { cause, .. } => cause.is_validation(),
            _ => false,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
