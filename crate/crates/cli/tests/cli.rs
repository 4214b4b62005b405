use std::path::Path;
use std::process::{Command, Output};

fn qve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qve")).args(args).env("RUST_LOG", "warn").output().expect("qve binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qve(args);
    assert!(out.status.success(), "qve {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, data: &Path, method: &str) -> String {
    let text = format!(
        r#"runs_dir = "{runs}"
source_path = "{data}/source.json"
target_train_path = "{data}/target_train.json"
target_eval_path = "{data}/target_eval.json"
synthetic_path = "{data}/target_synthetic.json"
source_synthetic_path = "{data}/source_synthetic.json"
n_annotations = 20
method = "{method}"
seeds = [0]

[train_cfg]
outer_iterations = 4
outer_batch = 8
inner_iterations = 2
inner_batch = 4
qve_lr = 0.001
qa_lr = 0.1

[finetune.source]
epochs = 1
batch_size = 8
lr = 0.5

[backend]
kind = "toy"
encoder_dim = 16
"#,
        runs = dir.join("runs").display(),
        data = data.display(),
    );
    let path = dir.join(format!("{method}.toml"));
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn sandbox(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["sandbox", "generate", "--out", data.to_str().unwrap(), "--noise", "0.3,0.2", "--seed", "7", "--contexts", "30"]);
    data
}

#[test]
fn sandbox_generate_writes_corpora_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = sandbox(tmp.path());
    for f in ["source.json", "source_synthetic.json", "target_train.json", "target_synthetic.json", "target_eval.json", "labels.jsonl"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let labels = std::fs::read_to_string(data.join("labels.jsonl")).unwrap();
    assert!(labels.lines().count() > 0);
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = sandbox(tmp.path());
    let cfg = write_config(tmp.path(), &data, "lm");
    let table = ok(&["run", "--config", &cfg]);
    assert!(table.contains("| lm |"), "{table}");
    let run = tmp.path().join("runs").join("lm-n20-k60-s0");
    assert!(run.join("report/record.json").is_file());
    let csv = tmp.path().join("report.csv");
    let again = ok(&["report", run.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(again.contains("lm-n20-k60-s0"));
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("run_id,"));
}

#[test]
fn filter_writes_report_next_to_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let data = sandbox(tmp.path());
    let cfg = write_config(tmp.path(), &data, "none");
    let out = tmp.path().join("filtered");
    let line = ok(&["filter", "--config", &cfg, "--method", "qve-rank", "--k", "40", "--out", out.to_str().unwrap()]);
    assert!(line.starts_with("qve_rank: kept"), "{line}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("filter_report.json")).unwrap()).unwrap();
    let input = report["input_count"].as_u64().unwrap();
    assert_eq!(report["kept_count"].as_u64().unwrap(), input * 40 / 100);
    assert!(out.join("filtered.json").is_file());
}

#[test]
fn train_rl_writes_log_and_estimator() {
    let tmp = tempfile::tempdir().unwrap();
    let data = sandbox(tmp.path());
    let cfg = write_config(tmp.path(), &data, "none");
    ok(&["train-rl", "--config", &cfg, "--run-id", "rl"]);
    let run = tmp.path().join("runs").join("rl-s0");
    assert!(run.join("qve/estimator.json").is_file());
    let rounds = std::fs::read_to_string(run.join("qve/rl/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 4);
    // A second invocation resumes from the complete log.
    ok(&["train-rl", "--config", &cfg, "--run-id", "rl"]);
    let rounds = std::fs::read_to_string(run.join("qve/rl/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 4);
}

#[test]
fn sweep_reports_failed_points_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = sandbox(tmp.path());
    let cfg = write_config(tmp.path(), &data, "lm");
    let out = qve(&["sweep", "--config", &cfg, "--axis", "k", "--values", "20,250,100"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("k_percent=250 failed"), "{stderr}");
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.contains("| lm |")).count(), 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert!(!qve(&["run", "--config", missing.to_str().unwrap()]).status.success());
    assert!(!qve(&["sweep", "--config", "x.toml", "--axis", "q", "--values", "1"]).status.success());
    assert!(!qve(&["filter", "--config", "x.toml", "--method", "magic"]).status.success());
}
