//! End-to-end tests of the `adee` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adee_core::bench::EvalReport;
use adee_core::model::load_model;
use adee_core::profiler::ProfileReport;

fn adee() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adee"))
}

fn run(args: &[&str]) -> Output {
    adee().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    dataset: PathBuf,
    task: PathBuf,
}

fn gen_fixture(extra: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.adee");
    let dataset = dir.path().join("data.jsonl");
    let task = dir.path().join("task.json");
    let mut args = vec![
        "gen-model",
        "--layers",
        "8",
        "--plant",
        "5",
        "--seed",
        "42",
        "--vocab",
        "24",
        "--examples",
        "12",
    ];
    args.extend_from_slice(extra);
    let out = adee()
        .args(&args)
        .arg("--out")
        .arg(&model)
        .arg("--dataset-out")
        .arg(&dataset)
        .arg("--task-out")
        .arg(&task)
        .output()
        .unwrap();
    assert_success(&out);
    Fixture {
        _dir: dir,
        model,
        dataset,
        task,
    }
}

#[test]
fn gen_model_is_deterministic_and_loadable() {
    let a = gen_fixture(&[]);
    let b = gen_fixture(&[]);
    assert_eq!(
        std::fs::read(&a.model).unwrap(),
        std::fs::read(&b.model).unwrap()
    );
    assert_eq!(
        std::fs::read(&a.dataset).unwrap(),
        std::fs::read(&b.dataset).unwrap()
    );
    assert_eq!(
        std::fs::read(&a.task).unwrap(),
        std::fs::read(&b.task).unwrap()
    );
    let model = load_model(&a.model).unwrap();
    assert_eq!(model.n_layers(), 8);
}

#[test]
fn gen_model_rejects_infeasible_plant_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = adee()
        .args(["gen-model", "--layers", "8", "--plant", "9", "--seed", "1"])
        .arg("--out")
        .arg(dir.path().join("m.adee"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--plant"));
}

#[test]
fn missing_model_file_is_a_runtime_error() {
    let f = gen_fixture(&[]);
    let out = adee()
        .args(["profile", "--model", "/nonexistent.adee"])
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn profile_to(f: &Fixture, mode: &str, seed: &str, out_path: &Path) -> ProfileReport {
    let out = adee()
        .args(["profile", "--mode", mode, "--seed", seed])
        .arg("--model")
        .arg(&f.model)
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .arg("--out")
        .arg(out_path)
        .output()
        .unwrap();
    assert_success(&out);
    ProfileReport::from_json(&std::fs::read_to_string(out_path).unwrap()).unwrap()
}

#[test]
fn profile_finds_the_planted_layer_in_both_modes() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let staged = profile_to(&f, "staged", "7", &dir.path().join("s.json"));
    let exhaustive = profile_to(&f, "exhaustive", "7", &dir.path().join("e.json"));
    assert_eq!(staged.optimal_layer, Some(5));
    assert_eq!(exhaustive.optimal_layer, Some(5));
    assert!(staged.restoration_validated && exhaustive.restoration_validated);
    assert!(staged.partial);
    assert!(!exhaustive.partial);
    assert_eq!(exhaustive.acc.len(), 9);
}

#[test]
fn profile_with_unreachable_labels_reports_null_layer() {
    let f = gen_fixture(&[]);
    // Rewrite the task to label sequences the model never produces.
    let text = std::fs::read_to_string(&f.task).unwrap();
    let mut task: serde_json::Value = serde_json::from_str(&text).unwrap();
    task["label_tokens"] = serde_json::json!({
        "class0": [[1, 1]],
        "class1": [[0, 1]],
        "class2": [[0, 0]],
    });
    std::fs::write(&f.task, serde_json::to_string_pretty(&task).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = profile_to(&f, "exhaustive", "7", &dir.path().join("null.json"));
    assert_eq!(report.optimal_layer, None);
    assert!(report.te.is_empty());
    assert_eq!(report.ate, None);
    assert!(report.acc.values().all(|&v| v == 0.0));
}

#[test]
fn adee_seed_env_var_overrides_the_flag() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let via_flag = dir.path().join("flag.json");
    let via_env = dir.path().join("env.json");
    profile_to(&f, "staged", "123", &via_flag);
    let out = adee()
        .args(["profile", "--mode", "staged", "--seed", "999"])
        .env("ADEE_SEED", "123")
        .arg("--model")
        .arg(&f.model)
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .arg("--out")
        .arg(&via_env)
        .output()
        .unwrap();
    assert_success(&out);
    assert_eq!(
        std::fs::read(&via_flag).unwrap(),
        std::fs::read(&via_env).unwrap()
    );
}

fn eval_json(f: &Fixture, extra: &[&str]) -> EvalReport {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.json");
    let out = adee()
        .args(["eval", "--seed", "7", "--format", "json"])
        .args(extra)
        .arg("--model")
        .arg(&f.model)
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .arg("--out")
        .arg(&path)
        .output()
        .unwrap();
    assert_success(&out);
    EvalReport::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn fixed_exit_at_full_depth_has_zero_deltas() {
    let f = gen_fixture(&[]);
    let report = eval_json(&f, &["--policy", "fixed", "--exit-layer", "8"]);
    let d = report.deltas.unwrap();
    assert_eq!(d.avg_accuracy_delta_pts, 0.0);
    assert_eq!(d.latency_improvement_pct, 0.0);
}

#[test]
fn fixed_exit_from_profile_is_perfect_and_cheap() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let profile_path = dir.path().join("p.json");
    profile_to(&f, "staged", "7", &profile_path);
    let report = eval_json(
        &f,
        &[
            "--policy",
            "fixed",
            "--profile",
            profile_path.to_str().unwrap(),
        ],
    );
    let avg = report.early_exit.avg.as_ref().unwrap();
    assert_eq!(avg.accuracy_pct, 100.0);
    assert_eq!(avg.mean_layer_fraction, 0.625);
    assert_eq!(report.deltas.unwrap().latency_improvement_pct, 37.5);
}

#[test]
fn unreachable_threshold_behaves_as_full_inference() {
    let f = gen_fixture(&[]);
    let report = eval_json(&f, &["--policy", "dynamic", "--threshold", "1.1"]);
    let base = report.baseline.avg.as_ref().unwrap();
    let ee = report.early_exit.avg.as_ref().unwrap();
    assert_eq!(base.accuracy_pct, ee.accuracy_pct);
    assert_eq!(ee.mean_layer_fraction, 1.0);
    for (class, cell) in &report.baseline.classes {
        let b = cell.stats().unwrap();
        let e = report.early_exit.classes[class].stats().unwrap();
        assert_eq!(b.correct, e.correct);
    }
}

#[test]
fn fixed_policy_with_null_profile_renders_dashes() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    // Make the task unmatchable, profile it (null optimal layer), then
    // evaluate the fixed policy against that profile.
    let text = std::fs::read_to_string(&f.task).unwrap();
    let mut task: serde_json::Value = serde_json::from_str(&text).unwrap();
    task["label_tokens"] = serde_json::json!({
        "class0": [[1, 1]],
        "class1": [[0, 1]],
        "class2": [[0, 0]],
    });
    std::fs::write(&f.task, serde_json::to_string_pretty(&task).unwrap()).unwrap();
    let profile_path = dir.path().join("null.json");
    profile_to(&f, "staged", "7", &profile_path);
    let report = eval_json(
        &f,
        &[
            "--policy",
            "fixed",
            "--profile",
            profile_path.to_str().unwrap(),
        ],
    );
    assert!(report.early_exit.avg.is_none());
    assert!(report.deltas.is_none());
    assert!(report
        .early_exit
        .classes
        .values()
        .all(|c| c.stats().is_none()));
    // And the markdown render shows dash cells for the early-exit column.
    let md_path = dir.path().join("eval.md");
    let out = adee()
        .args(["eval", "--policy", "fixed", "--seed", "7", "--format", "md"])
        .arg("--profile")
        .arg(&profile_path)
        .arg("--model")
        .arg(&f.model)
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .arg("--out")
        .arg(&md_path)
        .output()
        .unwrap();
    assert_success(&out);
    let md = std::fs::read_to_string(&md_path).unwrap();
    assert!(md.contains("fixed(-)"));
    assert!(md.contains("\u{2212}"));
}

#[test]
fn wall_clock_flag_adds_timing_to_the_artifact() {
    let f = gen_fixture(&[]);
    let without = eval_json(&f, &["--policy", "fixed", "--exit-layer", "5"]);
    assert!(without
        .baseline
        .avg
        .as_ref()
        .unwrap()
        .mean_wall_ms
        .is_none());
    let with = eval_json(
        &f,
        &["--policy", "fixed", "--exit-layer", "5", "--wall-clock"],
    );
    let wall = with.baseline.avg.as_ref().unwrap().mean_wall_ms;
    assert!(wall.is_some_and(|w| w > 0.0));
}

#[test]
fn fixed_policy_without_layer_source_is_usage_error() {
    let f = gen_fixture(&[]);
    let out = adee()
        .args(["eval", "--policy", "fixed"])
        .arg("--model")
        .arg(&f.model)
        .arg("--dataset")
        .arg(&f.dataset)
        .arg("--task")
        .arg(&f.task)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_renders_json_values_into_markdown() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let profile_path = dir.path().join("p.json");
    let report = profile_to(&f, "exhaustive", "7", &profile_path);
    let out = adee()
        .args(["report", "--format", "md"])
        .arg("--input")
        .arg(&profile_path)
        .output()
        .unwrap();
    assert_success(&out);
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| planted | 8 | 5 | yes |"));
    let ate = report.ate.unwrap();
    assert!(md.contains(&format!("{ate:.4}")));
}

#[test]
fn report_handles_multiple_tasks_with_dashes() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    profile_to(&f, "staged", "7", &good);
    // A second task whose labels are unreachable: null optimal layer.
    let text = std::fs::read_to_string(&f.task).unwrap();
    let mut task: serde_json::Value = serde_json::from_str(&text).unwrap();
    task["task_id"] = serde_json::json!("ghost");
    task["label_tokens"] = serde_json::json!({
        "class0": [[1, 1]],
        "class1": [[0, 1]],
        "class2": [[0, 0]],
    });
    std::fs::write(&f.task, serde_json::to_string_pretty(&task).unwrap()).unwrap();
    let ghost = dir.path().join("ghost.json");
    profile_to(&f, "staged", "7", &ghost);
    let out = adee()
        .args(["report", "--format", "md"])
        .arg("--input")
        .arg(&good)
        .arg("--input")
        .arg(&ghost)
        .output()
        .unwrap();
    assert_success(&out);
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| planted | 8 | 5 | yes |"));
    assert!(md.contains("| ghost | 8 | \u{2212} | \u{2212} | \u{2212} |"));
}

#[test]
fn report_with_no_inputs_is_an_error() {
    let out = run(&["report", "--format", "md"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no results"));
}

#[test]
fn eval_markdown_artifact_is_deterministic_across_runs() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.md");
    let b = dir.path().join("b.md");
    for path in [&a, &b] {
        let out = adee()
            .args([
                "eval",
                "--policy",
                "fixed",
                "--exit-layer",
                "5",
                "--seed",
                "3",
            ])
            .args(["--format", "md"])
            .arg("--model")
            .arg(&f.model)
            .arg("--dataset")
            .arg(&f.dataset)
            .arg("--task")
            .arg(&f.task)
            .arg("--out")
            .arg(path)
            .output()
            .unwrap();
        assert_success(&out);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    let out_path = dir.path().join("out.json");
    let cfg = serde_json::json!({
        "model": f.model,
        "dataset": f.dataset,
        "task": f.task,
        "mode": "exhaustive",
        "seed": 7,
    });
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = adee()
        .args(["profile"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_success(&out);
    let report = ProfileReport::from_json(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(!report.partial, "config file should select exhaustive mode");
    // Flag overrides the config's mode.
    let out = adee()
        .args(["profile", "--mode", "staged"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_success(&out);
    let report = ProfileReport::from_json(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(report.partial, "flag should override the config file");
}

#[test]
fn jobs_flag_does_not_change_results() {
    let f = gen_fixture(&[]);
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.json");
    let many = dir.path().join("many.json");
    for (path, jobs) in [(&one, "1"), (&many, "8")] {
        let out = adee()
            .args([
                "profile",
                "--mode",
                "exhaustive",
                "--seed",
                "5",
                "--jobs",
                jobs,
            ])
            .arg("--model")
            .arg(&f.model)
            .arg("--dataset")
            .arg(&f.dataset)
            .arg("--task")
            .arg(&f.task)
            .arg("--out")
            .arg(path)
            .output()
            .unwrap();
        assert_success(&out);
    }
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&many).unwrap());
}
