//! Python module `ilf`.
//!
//! Records cross the boundary as plain dicts (through the stdlib `json`
//! module), so anything the JSONL files hold can be passed in or read back.
//! Long-running calls release the GIL.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ilf_core::backend::build_policy;
use ilf_core::config::BackendSpec;
use ilf_core::eval::{self, RankingSheet};
use ilf_core::ilf::{Context, Ilf};
use ilf_core::record::partition;
use ilf_core::refine::TemplateSet;
use ilf_core::tokenize as tok;
use ilf_core::wordremoval::{self, RemovalTask};
use ilf_core::{Beta, Policy, RunConfig, Sample};

create_exception!(
    ilf,
    IlfError,
    PyException,
    "Backend, storage or runtime failure in the ILF pipeline."
);

/// Invalid input becomes `ValueError`; everything else `IlfError`.
fn py_err(e: ilf_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        IlfError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A float, `"infinity"`, or `None` (infinity).
fn beta_arg(beta: Option<&Bound<'_, PyAny>>) -> PyResult<Beta> {
    let Some(beta) = beta.filter(|b| !b.is_none()) else {
        return Ok(Beta::Infinity);
    };
    let parsed = match beta.extract::<f64>() {
        Ok(b) => Beta::Finite(b),
        Err(_) => beta.extract::<String>()?.parse().map_err(py_err)?,
    };
    parsed.validate().map_err(py_err)
}

fn backend_arg(spec: &str) -> PyResult<BackendSpec> {
    spec.parse().map_err(py_err)
}

fn task_list(tasks: &[PyRef<'_, PyRemovalTask>]) -> Vec<RemovalTask> {
    tasks.iter().map(|t| t.inner.clone()).collect()
}

/// A word-removal task: a sentence of listed items and the words to drop.
#[pyclass(name = "RemovalTask", module = "ilf", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyRemovalTask {
    inner: RemovalTask,
}

#[pymethods]
impl PyRemovalTask {
    #[new]
    fn new(id: String, sentence: &str, remove_words: Vec<String>) -> PyResult<Self> {
        let inner = RemovalTask::from_sentence(id, sentence, remove_words).map_err(py_err)?;
        Ok(PyRemovalTask { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn sentence(&self) -> &str {
        &self.inner.sentence
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    /// Number of words to remove.
    #[getter]
    fn l(&self) -> usize {
        self.inner.remove_words.len()
    }

    #[getter]
    fn remove_words(&self) -> Vec<String> {
        self.inner.remove_words.clone()
    }

    #[getter]
    fn target(&self) -> &str {
        &self.inner.target
    }

    #[getter]
    fn stem(&self) -> &str {
        &self.inner.stem
    }

    fn full_target(&self) -> String {
        self.inner.full_target()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[staticmethod]
    fn from_dict(obj: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(PyRemovalTask { inner: from_py(obj)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "RemovalTask(id={:?}, k={}, remove_words={:?})",
            self.inner.id, self.inner.k, self.inner.remove_words
        )
    }
}

/// Run configuration. Keyword arguments use the TOML field names.
#[pyclass(name = "RunConfig", module = "ilf", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**fields))]
    fn new(fields: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner: RunConfig = match fields {
            Some(f) => from_py(f.as_any())?,
            None => RunConfig::default(),
        };
        inner.validate().map_err(py_err)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[setter]
    fn set_n(&mut self, n: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.n = n;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    /// Iterations of the loop.
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[setter]
    fn set_k(&mut self, k: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.k = k;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    /// `None` stands for infinity (keep only the best refinement).
    #[getter]
    fn beta(&self) -> Option<f64> {
        match self.inner.beta {
            Beta::Finite(b) => Some(b),
            Beta::Infinity => None,
        }
    }

    #[setter]
    fn set_beta(&mut self, beta: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        self.inner.beta = beta_arg(beta)?;
        Ok(())
    }

    /// Policy backend in the compact form, e.g. `rule-mock:0.5`.
    #[setter]
    fn set_backend(&mut self, spec: &str) -> PyResult<()> {
        self.inner.backend = backend_arg(spec)?;
        Ok(())
    }

    #[setter]
    fn set_refine_backend(&mut self, spec: &str) -> PyResult<()> {
        self.inner.refine_backend = Some(backend_arg(spec)?);
        Ok(())
    }

    #[setter]
    fn set_scorer(&mut self, scorer: &str) -> PyResult<()> {
        self.inner.scorer = scorer.parse().map_err(py_err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, n={}, k={}, beta={})",
            self.inner.seed, self.inner.n, self.inner.k, self.inner.beta
        )
    }
}

/// A language model handle; returned by a loop run or built from a spec.
#[pyclass(name = "Policy", module = "ilf", frozen, skip_from_py_object)]
pub struct PyPolicy {
    inner: Policy,
    templates: TemplateSet,
}

#[pymethods]
impl PyPolicy {
    /// `spec` uses the compact backend form, e.g. `categorical:a=0.5,b=0.5`.
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &str, seed: u64) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: build_policy(&backend_arg(spec)?, seed).map_err(py_err)?,
            templates: TemplateSet::load(None).map_err(py_err)?,
        })
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.handle().model_id.clone()
    }

    #[pyo3(signature = (prompt, n = 1, seed = 0))]
    fn generate(&self, py: Python<'_>, prompt: &str, n: usize, seed: u64) -> PyResult<Vec<String>> {
        let params = RunConfig::default().sampling.with_seed(seed);
        let policy = self.inner.clone();
        py.detach(|| ilf_core::backend::generate(policy.as_ref(), prompt, &params, n))
            .map_err(py_err)
    }

    /// Completions of the removal prompt for each task.
    #[pyo3(signature = (tasks, seed = 0))]
    fn predict(&self, py: Python<'_>, tasks: Vec<PyRef<'_, PyRemovalTask>>, seed: u64) -> PyResult<Vec<String>> {
        let tasks = task_list(&tasks);
        let params = RunConfig::default().sampling.with_seed(seed);
        let policy = self.inner.clone();
        let templates = &self.templates;
        py.detach(|| wordremoval::predict(policy.as_ref(), &tasks, templates, &params, 1))
            .map_err(py_err)
    }

    fn sequence_logprob(&self, prefix: &str, continuation: &str) -> PyResult<f64> {
        self.inner.sequence_logprob(prefix, continuation).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Policy({:?})", self.inner)
    }
}

/// The feedback-driven training loop over a run directory.
///
/// Re-running on the same directory resumes after the last finished iteration.
#[pyclass(name = "Pipeline", module = "ilf", frozen, skip_from_py_object)]
pub struct PyPipeline {
    ilf: Ilf,
}

impl PyPipeline {
    fn run(&self, py: Python<'_>, parts: Vec<Vec<Context>>) -> PyResult<Py<PyAny>> {
        let out = py.detach(|| self.ilf.run(&parts)).map_err(py_err)?;
        let result = PyDict::new(py);
        result.set_item("state", to_py(py, &out.state)?)?;
        result.set_item("resumed_from", out.resumed_from)?;
        result.set_item(
            "policy",
            PyPolicy {
                inner: out.policy,
                templates: self.ilf.templates().clone(),
            },
        )?;
        Ok(result.into_any().unbind())
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: &PyRunConfig, run_dir: PathBuf) -> PyResult<Self> {
        Ok(PyPipeline {
            ilf: Ilf::from_config(config.inner.clone(), &run_dir).map_err(py_err)?,
        })
    }

    /// Splits `tasks` into consecutive chunks of `contexts_per_iteration`, one
    /// per iteration, and returns `{"state", "resumed_from", "policy"}`.
    fn run_word_removal(
        &self,
        py: Python<'_>,
        tasks: Vec<PyRef<'_, PyRemovalTask>>,
        contexts_per_iteration: usize,
    ) -> PyResult<Py<PyAny>> {
        let k = self.ilf.config().k;
        let tasks = task_list(&tasks);
        if contexts_per_iteration == 0 || tasks.len() < k * contexts_per_iteration {
            return Err(PyValueError::new_err(format!(
                "{k} iteration(s) of {contexts_per_iteration} contexts need {} tasks, got {}",
                k * contexts_per_iteration,
                tasks.len()
            )));
        }
        let parts = tasks
            .chunks(contexts_per_iteration)
            .take(k)
            .map(|c| c.iter().cloned().map(Context::word_removal).collect())
            .collect();
        self.run(py, parts)
    }

    /// Splits sample dicts into `k` contiguous partitions, one per iteration.
    fn run_summarization(&self, py: Python<'_>, samples: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let samples: Vec<Sample> = from_py(samples)?;
        let parts = partition(&samples, self.ilf.config().k)
            .map_err(py_err)?
            .into_iter()
            .map(|p| p.into_iter().map(Context::summarization).collect())
            .collect();
        self.run(py, parts)
    }

    /// The untrained starting policy.
    #[getter]
    fn base_policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.ilf.root().clone(),
            templates: self.ilf.templates().clone(),
        }
    }
}

/// Normalised `exp(beta * score)` weights; `beta=None` puts all mass on the best.
#[pyfunction]
#[pyo3(signature = (scores, beta = None))]
fn importance_weights(scores: Vec<f64>, beta: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<f64>> {
    ilf_core::importance_weights(&scores, beta_arg(beta)?).map_err(py_err)
}

/// Index of the highest score; ties go to the earliest.
#[pyfunction]
fn select_best(scores: Vec<f64>) -> PyResult<usize> {
    ilf_core::select_best(&scores).map_err(py_err)
}

#[pyfunction]
fn count_tokens(text: &str) -> usize {
    tok::count_tokens(text)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tok::token_spans(text)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

#[pyfunction]
fn oracle_completion(sentence: &str, remove_words: Vec<String>) -> PyResult<String> {
    wordremoval::oracle_completion(sentence, &remove_words).map_err(py_err)
}

/// The full task set: `sentences_per_k` sentences for every item count and
/// removal count.
#[pyfunction]
#[pyo3(signature = (seed = 0, sentences_per_k = wordremoval::DEFAULT_SENTENCES_PER_K, word_list = None))]
fn generate_task_set(
    seed: u64,
    sentences_per_k: usize,
    word_list: Option<Vec<String>>,
) -> PyResult<Vec<PyRemovalTask>> {
    let words = word_list.unwrap_or_else(wordremoval::default_word_list);
    let tasks = wordremoval::generate_task_set(seed, &words, sentences_per_k).map_err(py_err)?;
    Ok(tasks.into_iter().map(|inner| PyRemovalTask { inner }).collect())
}

#[pyfunction]
fn oracle_predictions(tasks: Vec<PyRef<'_, PyRemovalTask>>) -> Vec<String> {
    wordremoval::oracle_predictions(&task_list(&tasks))
}

#[pyfunction]
#[pyo3(signature = (predictions, tasks, rate, seed = 0))]
fn corrupt_predictions(
    predictions: Vec<String>,
    tasks: Vec<PyRef<'_, PyRemovalTask>>,
    rate: f64,
    seed: u64,
) -> PyResult<Vec<String>> {
    wordremoval::corrupt_predictions(&predictions, &task_list(&tasks), rate, seed).map_err(py_err)
}

/// `{"n", "accuracy", "se", "per_l", "matches"}` with accuracy as a fraction.
#[pyfunction]
fn evaluate_exact_match<'py>(
    py: Python<'py>,
    predictions: Vec<String>,
    tasks: Vec<PyRef<'_, PyRemovalTask>>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = wordremoval::evaluate_exact_match(&predictions, &task_list(&tasks)).map_err(py_err)?;
    to_py(py, &report)
}

/// Sheets are dicts with `item_id`, `method_names` and `ranks`.
#[pyfunction]
fn win_rate<'py>(
    py: Python<'py>,
    sheets: &Bound<'py, PyAny>,
    method_a: &str,
    method_b: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let sheets: Vec<RankingSheet> = from_py(sheets)?;
    to_py(py, &eval::win_rate(&sheets, method_a, method_b).map_err(py_err)?)
}

#[pyfunction]
fn mean_ranks<'py>(py: Python<'py>, sheets: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let sheets: Vec<RankingSheet> = from_py(sheets)?;
    to_py(py, &eval::mean_ranks(&sheets).map_err(py_err)?)
}

/// `ln n - (n - 1) / n` nats.
#[pyfunction]
fn bon_kl(n: u64) -> PyResult<f64> {
    eval::analytic_bon_kl(n).map_err(py_err)
}

/// Monte-Carlo `KL(p || q)` between two backend specs: `(kl_nats, sem)`.
#[pyfunction]
#[pyo3(signature = (p, q, samples = eval::DEFAULT_KL_SAMPLES, sample_len = eval::DEFAULT_KL_SAMPLE_LEN, seed = 0))]
fn estimate_kl(py: Python<'_>, p: &str, q: &str, samples: usize, sample_len: usize, seed: u64) -> PyResult<(f64, f64)> {
    let p = build_policy(&backend_arg(p)?, seed).map_err(py_err)?;
    let q = build_policy(&backend_arg(q)?, seed).map_err(py_err)?;
    let est = py
        .detach(|| eval::estimate_kl(p.as_ref(), q.as_ref(), samples, sample_len, seed, 1))
        .map_err(py_err)?;
    Ok((est.kl_nats, est.sem))
}

/// Registers every class and function on `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IlfError", m.py().get_type::<IlfError>())?;
    m.add_class::<PyRemovalTask>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(importance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(select_best, m)?)?;
    m.add_function(wrap_pyfunction!(count_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_completion, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task_set, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(win_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(bon_kl, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_kl, m)?)?;
    Ok(())
}

#[pymodule]
fn ilf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
