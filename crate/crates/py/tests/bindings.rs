//! Drives the module from an embedded interpreter.

use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

/// Runs `code` with the module importable as `ilf` and `tmp` bound to a scratch directory.
fn run(code: &str) {
    let dir = tempfile::tempdir().unwrap();
    Python::attach(|py| {
        let module = PyModule::new(py, "ilf").unwrap();
        ilf::register(&module).unwrap();
        py.import("sys")
            .unwrap()
            .getattr("modules")
            .unwrap()
            .set_item("ilf", &module)
            .unwrap();
        let globals = PyDict::new(py);
        globals.set_item("tmp", dir.path().to_str().unwrap()).unwrap();
        let code = CString::new(format!("import ilf\n{code}")).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn weights_and_selection() {
    run(r#"
import math
w = ilf.importance_weights([0.0, math.log(3.0)], 1.0)
assert abs(w[0] - 0.25) < 1e-12 and abs(w[1] - 0.75) < 1e-12, w
assert ilf.importance_weights([1.0, 5.0, 5.0]) == [0.0, 1.0, 0.0]
assert ilf.importance_weights([1.0, 2.0], "infinity") == [0.0, 1.0]
assert ilf.select_best([0.1, 0.9, 0.9]) == 1
try:
    ilf.importance_weights([], 1.0)
    raise AssertionError("empty scores accepted")
except ValueError:
    pass
try:
    ilf.importance_weights([1.0], -2.0)
    raise AssertionError("negative beta accepted")
except ValueError:
    pass
"#);
}

#[test]
fn word_removal_tasks_round_trip() {
    run(r#"
tasks = ilf.generate_task_set(seed=7)
assert len(tasks) == 1350
assert {t.l for t in tasks} == {1, 2, 3}
assert all(t.l <= t.k for t in tasks)
t = tasks[0]
again = ilf.RemovalTask.from_dict(t.to_dict())
assert again.to_dict() == t.to_dict()
assert t.full_target() == t.stem + t.target

report = ilf.evaluate_exact_match(ilf.oracle_predictions(tasks), tasks)
assert report["n"] == 1350 and report["accuracy"] == 1.0
bad = ilf.corrupt_predictions(ilf.oracle_predictions(tasks), tasks, 0.615, seed=1)
acc = ilf.evaluate_exact_match(bad, tasks)["accuracy"]
assert abs(acc - 0.385) < 1 / 1350, acc

task = ilf.RemovalTask("x", "You are such a jerk, and a nice person, and an idiot.", ["jerk"])
assert task.k == 2 and task.l == 1
assert ilf.oracle_completion(task.sentence, ["jerk"]) == task.target
"#);
}

#[test]
fn tokenizer_and_metrics() {
    run(r#"
assert ilf.tokenize("Hi, there!") == ["Hi", ",", "there", "!"]
assert ilf.count_tokens("Hi, there!") == 4
assert abs(ilf.bon_kl(64) - 3.1745) < 5e-5
assert ilf.bon_kl(1) == 0.0

sheets = [{"item_id": str(i), "method_names": ["a", "b"], "ranks": [1, 1]} for i in range(4)]
w = ilf.win_rate(sheets, "a", "b")
assert w["p"] == 0.5 and w["ties"] == 4
ranks = {r["method"]: r["mean"] for r in ilf.mean_ranks(sheets)}
assert ranks == {"a": 1.5, "b": 1.5}

kl, sem = ilf.estimate_kl("categorical:a=0.5,b=0.5", "categorical:a=0.5,b=0.5", samples=100, sample_len=3)
assert kl == 0.0 and sem == 0.0
"#);
}

#[test]
fn config_accessors_validate() {
    run(r#"
cfg = ilf.RunConfig(task="word_removal", n=3, k=2, feedback={"kind": "oracle_word_removal"})
assert (cfg.n, cfg.k, cfg.beta) == (3, 2, None)
cfg.beta = 0.5
assert cfg.beta == 0.5
back = ilf.RunConfig.from_toml(cfg.to_toml())
assert back.to_dict() == cfg.to_dict()
try:
    cfg.n = 0
    raise AssertionError("n=0 accepted")
except ValueError:
    pass
assert cfg.n == 3
try:
    ilf.RunConfig(bogus_field=1)
    raise AssertionError("unknown field accepted")
except ValueError:
    pass
"#);
}

#[test]
fn pipeline_trains_and_resumes() {
    run(r#"
import os
cfg = ilf.RunConfig(task="word_removal", n=3, k=2, scorer={"kind": "max_length"},
                    feedback={"kind": "oracle_word_removal"})
cfg.backend = "rule-mock:0.6"
cfg.refine_backend = "rule-mock"
tasks = ilf.generate_task_set(seed=3, sentences_per_k=4)
pipe = ilf.Pipeline(cfg, tmp)
out = pipe.run_word_removal(tasks, 30)
assert out["resumed_from"] == 0 and out["state"]["iteration"] == 2
assert os.path.exists(os.path.join(tmp, "iter_2", "finetune.jsonl"))

held_in = tasks[:60]
score = lambda policy: ilf.evaluate_exact_match(policy.predict(held_in), held_in)["accuracy"]
assert score(out["policy"]) > score(pipe.base_policy)

again = ilf.Pipeline(cfg, tmp).run_word_removal(tasks, 30)
assert again["resumed_from"] == 2
assert again["policy"].model_id == out["policy"].model_id
try:
    pipe.run_word_removal(tasks[:10], 30)
    raise AssertionError("short task list accepted")
except ValueError:
    pass
"#);
}

#[test]
fn backend_failures_raise_ilf_error() {
    run(r#"
p = ilf.Policy("constant:hello")
assert p.generate("anything") == ["hello"]
try:
    ilf.Policy("scripted:/nonexistent/fixtures").generate("x")
    raise AssertionError("missing fixtures accepted")
except ilf.IlfError as e:
    assert "nonexistent" in str(e), e
try:
    ilf.Policy("bogus:spec")
    raise AssertionError("bad spec accepted")
except ValueError:
    pass
"#);
}
