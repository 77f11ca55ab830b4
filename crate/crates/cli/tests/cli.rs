//! Runs the built `ilf` binary end to end.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn ilf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(args)
        .output()
        .expect("spawn ilf")
}

fn ilf_stdin(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn ilf");
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json_out(out: &Output) -> Value {
    serde_json::from_str(stdout(out).trim()).unwrap()
}

fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn summarization_samples(path: &Path) {
    let rows: Vec<Value> = (0..4)
        .map(|i| {
            json!({
                "id": format!("s{i}"),
                "title": "Roommate keeps borrowing my bike",
                "post": format!("My roommate took my bike {} times this month without asking. I bought a lock.", i + 2),
                "initial_output": "Roommate borrows bike.",
                "feedback": "Mention the lock and how often it happened.",
            })
        })
        .collect();
    write_jsonl(path, &rows);
}

#[test]
fn bon_kl_prints_the_closed_form() {
    assert_eq!(stdout(&ilf(&["bon-kl", "--n", "64"])).trim(), "3.1745");
    assert_eq!(stdout(&ilf(&["bon-kl", "--n", "1"])).trim(), "0.0000");
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    assert_eq!(ilf(&["--version"]).status.code(), Some(0));
    assert_eq!(ilf(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ilf(&["bon-kl", "--n", "0"]).status.code(), Some(1));
    assert_eq!(ilf(&["bon-kl"]).status.code(), Some(1));
    assert_eq!(ilf(&["bon-kl", "--n", "4", "--beta", "-1"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = ilf(&["wordeval", p(&missing), "--oracle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));

    let garbled = dir.path().join("garbled.jsonl");
    fs::write(&garbled, "{\"id\": 1\n").unwrap();
    assert_eq!(ilf(&["wordeval", p(&garbled), "--oracle"]).status.code(), Some(1));
}

#[test]
fn oracle_predictions_score_perfectly_through_a_pipe() {
    let tasks = stdout(&ilf(&["wordgen", "--seed", "7"]));
    assert_eq!(tasks.lines().count(), 1350);
    let report = json_out(&ilf_stdin(&["wordeval", "--oracle", "--json"], tasks.as_bytes()));
    assert_eq!(report["n"], 1350);
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["per_l"].as_array().unwrap().len(), 3);
}

#[test]
fn corrupted_predictions_hit_the_requested_rate() {
    let tasks = stdout(&ilf(&["wordgen", "--seed", "3"]));
    let report = json_out(&ilf_stdin(
        &["wordeval", "--oracle", "--corrupt", "0.615", "--json", "--seed", "3"],
        tasks.as_bytes(),
    ));
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((acc - 0.385).abs() < 1.0 / 1350.0, "{acc}");
}

#[test]
fn same_seed_gives_byte_identical_output() {
    let a = ilf(&["wordgen", "--seed", "42", "--sentences-per-k", "5"]);
    let b = ilf(&["wordgen", "--seed", "42", "--sentences-per-k", "5"]);
    let c = ilf(&["wordgen", "--seed", "43", "--sentences-per-k", "5"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
    assert_eq!(stdout(&a).lines().count(), 135);
}

#[test]
fn explicit_predictions_are_matched_by_task_id() {
    let dir = tempfile::tempdir().unwrap();
    let tasks_path = dir.path().join("tasks.jsonl");
    stdout(&ilf(&["wordgen", "--sentences-per-k", "2", "-o", p(&tasks_path)]));
    let tasks: Vec<Value> = fs::read_to_string(&tasks_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let preds: Vec<Value> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let prediction = if i % 2 == 0 {
                t["target"].clone()
            } else {
                json!(" wrong.")
            };
            json!({ "task_id": t["id"], "prediction": prediction })
        })
        .collect();
    let preds_path = dir.path().join("preds.jsonl");
    write_jsonl(&preds_path, &preds);
    let results = dir.path().join("results.jsonl");
    let report = json_out(&ilf(&[
        "wordeval",
        p(&tasks_path),
        "--predictions",
        p(&preds_path),
        "--results",
        p(&results),
        "--json",
    ]));
    // 27 (k, l) pairs with l <= k, two sentences each.
    assert_eq!(report["n"], 54);
    assert_eq!(report["accuracy"], 0.5);
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), 54);

    write_jsonl(&preds_path, &preds[1..]);
    assert_eq!(
        ilf(&["wordeval", p(&tasks_path), "--predictions", p(&preds_path)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn winrate_of_all_ties_is_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rankings.jsonl");
    let rows: Vec<Value> = (0..10)
        .map(|i| json!({"item_id": format!("i{i}"), "method_names": ["ilf", "human"], "ranks": [1, 1]}))
        .collect();
    write_jsonl(&path, &rows);
    // Binomial SE at p = 0.5 over 10 items: sqrt(0.25 / 10) = 15.8%.
    assert_eq!(
        stdout(&ilf(&["winrate", "--a", "ilf", "--b", "human", p(&path)])).trim(),
        "50.0 ± 15.8"
    );
}

#[test]
fn rank_eval_reports_mean_ranks_and_win_rates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rankings.jsonl");
    write_jsonl(
        &path,
        &[
            json!({"item_id": "a", "method_names": ["ilf", "human", "base"], "ranks": [1, 2, 3]}),
            json!({"item_id": "b", "method_names": ["ilf", "human", "base"], "ranks": [2, 1, 3]}),
            json!({"item_id": "c", "method_names": ["ilf", "human", "base"], "ranks": [1, 1, 3]}),
        ],
    );
    let report = json_out(&ilf(&["rank-eval", p(&path), "--reference", "base", "--json"]));
    let ranks = report["mean_ranks"].as_array().unwrap();
    let mean = |m: &str| {
        ranks.iter().find(|r| r["method"] == m).unwrap()["mean"]
            .as_f64()
            .unwrap()
    };
    // Tied ranks become fractional: the tie at 1 counts as 1.5 for both.
    assert!((mean("ilf") - (1.0 + 2.0 + 1.5) / 3.0).abs() < 1e-12);
    assert!((mean("human") - (2.0 + 1.0 + 1.5) / 3.0).abs() < 1e-12);
    assert!((mean("base") - 3.0).abs() < 1e-12);
    for w in report["win_rates"].as_array().unwrap() {
        assert_eq!(w[1]["p"], 1.0, "{w}");
    }
}

#[test]
fn kl_of_a_policy_with_itself_is_zero() {
    let backend = "categorical:a=0.5,b=0.3,c=0.2";
    let out = json_out(&ilf(&[
        "kl",
        "--p",
        backend,
        "--q",
        backend,
        "--samples",
        "200",
        "--len",
        "4",
        "--json",
    ]));
    assert_eq!(out["kl_nats"], 0.0);

    let out = json_out(&ilf(&[
        "kl",
        "--p",
        "categorical:a=0.5,b=0.5",
        "--q",
        "categorical:a=0.25,b=0.75",
        "--samples",
        "4000",
        "--len",
        "1",
        "--json",
    ]));
    let exact = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let kl = out["kl_nats"].as_f64().unwrap();
    let sem = out["sem"].as_f64().unwrap();
    assert!((kl - exact).abs() < 4.0 * sem, "{kl} vs {exact} (sem {sem})");
}

#[test]
fn refine_select_weight_and_nll_chain() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.jsonl");
    summarization_samples(&samples);
    let refinements = dir.path().join("refinements.jsonl");
    let scored = dir.path().join("scored.jsonl");
    let finetune = dir.path().join("finetune.jsonl");
    let common = ["--n", "3", "--seed", "5", "--scorer", "max_length", "--beta", "1.0"];

    let run = |args: &[&str]| stdout(&ilf(&[args, &common[..]].concat()));
    run(&["refine", "--samples", p(&samples), "-o", p(&refinements)]);
    let sets: Vec<Value> = fs::read_to_string(&refinements)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(sets.len(), 4);
    assert!(sets.iter().all(|s| s["candidates"].as_array().unwrap().len() == 3));

    run(&[
        "select",
        "--samples",
        p(&samples),
        "--refinements",
        p(&refinements),
        "-o",
        p(&scored),
    ]);
    run(&[
        "weight",
        "--samples",
        p(&samples),
        "--refinements",
        p(&scored),
        "-o",
        p(&finetune),
    ]);
    let records: Vec<Value> = fs::read_to_string(&finetune)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Finite beta keeps every candidate, weighted.
    assert_eq!(records.len(), 12);
    let total: f64 = records.iter().map(|r| r["weight"].as_f64().unwrap()).sum();
    assert!((total - 4.0).abs() < 1e-9, "{total}");

    let nll = json_out(&ilf(&["nll", "--dataset", p(&finetune), "--json"]));
    assert_eq!(nll["n"], 12);
    assert!(nll["mean_nll_per_token"].as_f64().unwrap() >= 0.0);

    // Weighting unscored refinements is a usage error.
    let out = ilf(&[
        "weight",
        "--samples",
        p(&samples),
        "--refinements",
        p(&refinements),
        "-o",
        p(&finetune),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn rm_eval_reports_accuracy_over_comparisons() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let rows: Vec<Value> = (0..6)
        .map(|i| {
            json!({
                "id": format!("c{i}"),
                "title": "Lost my keys",
                "post": "I lost my keys twice this week. I now keep them on a hook.",
                "initial_output": "",
                "feedback": "",
                "comparison": {
                    "output_a": "Keys lost.",
                    "output_b": "Lost keys twice, now uses a hook.",
                    "preferred": if i % 2 == 0 { "A" } else { "B" },
                },
            })
        })
        .collect();
    write_jsonl(&pairs, &rows);
    for protocol in ["binary", "comparison"] {
        let r = json_out(&ilf(&[
            "rm-eval",
            "--pairs",
            p(&pairs),
            "--protocol",
            protocol,
            "--json",
        ]));
        assert_eq!(r["n"], 6, "{protocol}");
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn word_removal_ilf_run_trains_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        r#"
task = "word_removal"
n = 3
k = 2

[feedback]
kind = "oracle_word_removal"

[refine_backend]
kind = "rule_mock"

[wordremoval]
sentences_per_k = 4
contexts_per_iteration = 40
"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let args = [
        "ilf-run",
        "--config",
        p(&config),
        "--run-dir",
        p(&run_dir),
        "--backend",
        "rule-mock:0.6",
        "--scorer",
        "max_length",
        "--seed",
        "9",
    ];
    let first = stdout(&ilf(&args));
    assert!(first.contains("iteration 2:"), "{first}");
    for i in 1..=2 {
        assert!(run_dir.join(format!("iter_{i}/finetune.jsonl")).exists());
    }
    let eval: Vec<Value> = fs::read_to_string(run_dir.join("eval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let acc = |policy: &str, split: &str| {
        eval.iter()
            .find(|r| r["policy"] == policy && r["split"] == split)
            .unwrap()["accuracy"]
            .as_f64()
            .unwrap()
    };
    assert!(acc("trained", "held_in") > acc("base", "held_in"));
    assert_eq!(eval[0]["n"].as_u64().unwrap() + eval[1]["n"].as_u64().unwrap(), 108);

    let state = fs::read(run_dir.join("state.jsonl")).unwrap();
    let second = stdout(&ilf(&args));
    assert!(second.contains("resumed after iteration 2"), "{second}");
    assert_eq!(fs::read(run_dir.join("state.jsonl")).unwrap(), state);

    let mut changed = args.to_vec();
    *changed.last_mut().unwrap() = "10";
    assert_eq!(ilf(&changed).status.code(), Some(1));
}

#[test]
fn summarization_ilf_run_needs_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilf(&["ilf-run", "--run-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--contexts"));
}

#[test]
fn closed_stdout_is_a_clean_exit() {
    use std::io::Read;
    let mut child = Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(["wordgen", "--sentences-per-k", "400"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = [0u8; 16];
    child.stdout.take().unwrap().read_exact(&mut first).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
}
