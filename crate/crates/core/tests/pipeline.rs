use std::path::Path;
use std::process::Command;

use zsdistill::pipeline::{
    evaluate_gates, run_experiment, ExperimentConfig, PipelineError, RunOptions, Stage, Summary,
};

const TINY: &str = r#"
name = "tiny"
seed = 4
replicates = 1

[data]
teacher_per_class = 8
pool_per_class = 8
heldout_per_class = 2
finetune_per_class = 4
test_per_class = 3

[teacher]
floor = 0.0
probe_floor = 0.0

[teacher.opt]
steps = 15
batch = 16

[pretrain]
min_drop = 0.0
min_cosine = -1.0

[pretrain.opt]
steps = 15
batch = 16
lr = 3e-3

[finetune.opt]
steps = 5
batch = 16

[[runs]]
name = "l2"
loss = "l2_feature"

[[runs]]
name = "clip"
loss = "clip"

[[testsets]]
name = "natural"
domain = "natural"

[[testsets]]
name = "blurred"
domain = "natural"
corruption = "gaussian_blur"
severity = 2

[table]
columns = ["l2", "clip"]

[[table.rows]]
label = "natural"
testset = "natural"
models = ["l2", "clip"]

[[gates]]
name = "sane"
plus = ["teacher@natural"]
at_least = 0.0
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY, "tiny.toml").unwrap();
    cfg.out = dir.to_path_buf();
    cfg
}

fn quiet() -> RunOptions {
    RunOptions {
        stages: None,
        echo: false,
    }
}

fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn full_run_writes_reports_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_experiment(&cfg, &quiet()).unwrap();
    assert!(first.trained_steps > 0);
    assert!(first.passed);
    for f in [
        "summary.json",
        "matrix.csv",
        "table.csv",
        "matrix.svg",
        "eval_seed4.csv",
    ] {
        assert!(dir.path().join("reports").join(f).exists(), "{f}");
    }
    let matrix = std::fs::read_to_string(dir.path().join("reports/matrix.csv")).unwrap();
    assert_eq!(matrix.lines().next().unwrap(), "model,natural,blurred");
    assert_eq!(matrix.lines().count(), 5);
    assert_eq!(
        Summary::load(&dir.path().join("reports/summary.json")).unwrap(),
        first
    );

    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.contains("trained steps total="));

    let before = reports(dir.path());
    let second = run_experiment(&cfg, &quiet()).unwrap();
    assert_eq!(second.trained_steps, 0);
    assert_eq!(second.matrix, first.matrix);
    assert_eq!(reports(dir.path()), before);

    let other = tempfile::tempdir().unwrap();
    run_experiment(&tiny(other.path()), &quiet()).unwrap();
    assert_eq!(reports(other.path()), before);
}

#[test]
fn later_stage_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(
        &tiny(dir.path()),
        &RunOptions {
            stages: Some(vec![Stage::Finetune]),
            echo: false,
        },
    )
    .unwrap_err();
    match err {
        PipelineError::MissingDependency {
            stage, needed_by, ..
        } => {
            assert_eq!(stage, "teacher");
            assert!(!needed_by.is_empty());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn gates_combine_cells() {
    let mut cfg = tiny(Path::new("unused"));
    cfg.gates = toml::from_str::<ExperimentConfig>(
        r#"
[[gates]]
name = "gap"
plus = ["l2@natural"]
minus = ["clip@natural"]
at_least = 10.0
at_most = 30.0

[[gates]]
name = "missing"
plus = ["l2@blurred"]
at_least = 0.0
"#,
    )
    .unwrap()
    .gates;
    let mut s = Summary::default();
    s.matrix
        .entry("l2".into())
        .or_default()
        .insert("natural".into(), 80.0);
    s.matrix
        .entry("clip".into())
        .or_default()
        .insert("natural".into(), 55.0);
    let g = evaluate_gates(&cfg, &s.matrix);
    assert_eq!(g[0].value, Some(25.0));
    assert!(g[0].pass);
    assert_eq!(g[1].value, None);
    assert!(!g[1].pass);
}

#[test]
fn config_errors_name_the_key() {
    let bad = TINY.replace("probe_floor", "probe_flor");
    let e = ExperimentConfig::from_toml(&bad, "bad.toml")
        .unwrap_err()
        .to_string();
    assert!(e.contains("probe_flor") && e.contains("bad.toml"), "{e}");

    let bad = TINY.replace("loss = \"clip\"", "loss = \"clop\"");
    let e = ExperimentConfig::from_toml(&bad, "bad.toml").unwrap_err();
    assert!(
        matches!(&e, PipelineError::Invalid { key, .. } if key == "runs[1].loss"),
        "{e}"
    );

    let bad = TINY.replace("\"teacher@natural\"", "\"teacher@nowhere\"");
    let e = ExperimentConfig::from_toml(&bad, "bad.toml").unwrap_err();
    assert!(
        matches!(&e, PipelineError::Invalid { key, .. } if key.starts_with("gates[0]")),
        "{e}"
    );
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zsdistill"))
}

#[test]
fn cli_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, TINY.replace("min_cosine", "min_cosin")).unwrap();
    let out = cli()
        .args(["run", "-q", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_cosin"));
}

#[test]
fn cli_prints_bundled_and_default_configs() {
    for args in [
        &["print-config", "--config", "table3_toy"][..],
        &["print-config", "--defaults"],
    ] {
        let out = cli().args(args).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let cfg = ExperimentConfig::from_toml(&text, "stdout").unwrap();
        assert!(!cfg.runs.is_empty());
    }
}

#[test]
fn cli_exports_data_and_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    let out_dir = dir.path().join("out");
    for cmd in ["gen-data", "gen-prompts"] {
        let out = cli()
            .args([cmd, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let manifest = out_dir.join("data/test_natural/manifest.csv");
    assert!(manifest.exists());
    let prompts = std::fs::read_to_string(out_dir.join("prompts.csv")).unwrap();
    assert!(prompts.starts_with("dataset,class,prompt"));
    assert!(prompts.contains(":1.5)"));
}

#[test]
fn cli_unknown_stage_is_an_error() {
    let out = cli()
        .args(["run", "-q", "--stage", "distill"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
