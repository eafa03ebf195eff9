use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data.synthetic]
n_individuals = 40
n_questions = 10

[cf]
epochs = 30

[cluster]
elbow_k = [2, 3, 4]
sweep_k = [1, 2]

[analytics.report]
min_support = 2

[lm]
context_len = 8

[lm.pretrain]
epochs = 2
context_samples = 100
max_context_pairs = 4

[spm]
epochs = 2

[eval]
unseen_k = ["1", "all"]
context_k = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persona-steer"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), config).unwrap();
    dir
}

const CHAIN: &[&str] = &[
    "gen-synthetic",
    "split",
    "fit-cf",
    "cluster",
    "analyze",
    "pretrain-lm",
    "train-spm",
    "eval",
    "embed-unseen",
    "sweep",
];

#[test]
fn eval_without_soft_prompt_names_train_spm() {
    let dir = setup(SMALL);
    for c in ["gen-synthetic", "split", "fit-cf", "pretrain-lm"] {
        ok(dir.path(), &[c]);
    }
    let out = run(dir.path(), &["eval"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[dependency]"), "{stderr}");
    assert!(stderr.contains("train-spm"), "{stderr}");
    assert!(stderr.contains("spm_prefix.json"), "{stderr}");
}

#[test]
fn missing_dataset_names_gen_synthetic() {
    let dir = setup(SMALL);
    let stderr = String::from_utf8_lossy(&run(dir.path(), &["split"]).stderr).into_owned();
    assert!(
        stderr.starts_with("error[dependency]") && stderr.contains("gen-synthetic"),
        "{stderr}"
    );
}

#[test]
fn changed_settings_invalidate_downstream_artifacts() {
    let dir = setup(SMALL);
    for c in ["gen-synthetic", "split", "fit-cf"] {
        ok(dir.path(), &[c]);
    }
    let out = run(dir.path(), &["--seed", "9", "cluster"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[incompatibility]"), "{stderr}");
    assert!(stderr.contains("split"), "{stderr}");
}

#[test]
fn bad_config_is_a_parse_error() {
    let dir = setup("[cf]\ndim = \"sixteen\"\n");
    let out = run(dir.path(), &["split"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[parse]"), "{stderr}");
    assert!(stderr.contains("config.toml:2"), "{stderr}");
}

#[test]
fn chain_writes_reports_and_manifests_deterministically() {
    let a = setup(SMALL);
    let b = setup(SMALL);
    for dir in [&a, &b] {
        for c in CHAIN {
            ok(dir.path(), &[c]);
        }
        ok(dir.path(), &["eval", "--baseline", "context", "--context-k", "2"]);
        ok(dir.path(), &["eval", "--persona", "cluster"]);
        ok(dir.path(), &["train-spm", "--mode", "prompt"]);
        ok(dir.path(), &["embed-unseen", "--k", "1"]);
    }
    let files = [
        "reports/comparison.md",
        "reports/summary.csv",
        "reports/raw_q.json",
        "reports/context_raw_q.csv",
        "reports/sweep_unseen.csv",
        "reports/sweep_clusters.csv",
        "analysis/between_clusters.md",
        "spm_prompt.json",
        "unseen_k1.json",
        "manifests/eval.json",
        "manifests/sweep.json",
    ];
    for f in files {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("out/manifests/sweep.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert!(manifest["inputs"]["spm_prefix.json"].is_string());
    assert!(manifest["outputs"]["reports/sweep_unseen.csv"].is_string());
    let summary = fs::read_to_string(a.path().join("out/reports/summary.csv")).unwrap();
    assert!(summary.lines().count() >= 8, "{summary}");
}
