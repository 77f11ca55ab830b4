//! Imitation learning from language feedback. A model's outputs are rewritten
//! in light of written feedback, the best rewrites are kept, and the model is
//! finetuned on them, possibly over several rounds.
//!
//! Every model interaction goes through [`backend::LanguageModel`], so the
//! whole pipeline runs offline against the rule-based and scripted backends.

pub mod annotate;
pub mod backend;
pub mod config;
pub mod error;
pub mod eval;
pub mod ilf;
pub mod parallel;
pub mod record;
pub mod refine;
pub mod rng;
pub mod select;
pub mod tokenize;
pub mod wordremoval;

pub use backend::{LabelProbe, LanguageModel, Policy, PolicyHandle};
pub use config::{Beta, FinetuneMode, RunConfig, SamplingParams};
pub use error::{Error, Result};
pub use record::{FeedbackCategory, FinetuneRecord, RefinementSet, Sample};
pub use select::{importance_weights, select_best, ScorerKind, ScorerSpec};
