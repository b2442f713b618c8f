//! End-to-end tests of the `popgat` binary: exit codes, artifact layout
//! and bit-level reproducibility of whole subcommand invocations.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_popgat"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should launch")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_CONFIG: &str = r#"
profile = "desk"
seed = 11
architecture = "mlp-metadata"

[synth]
n_patients = 14
shape = [8, 8, 8]

[graph]
k = 3
mi_neighbors = 2
context_size = 6

[segnet]
input_size = [8, 8]
depth = 2
base_filters = 4
embed_dim = 8

[schedule]
batch = 4
epoch_size = 8
min_epochs = 2
min_epochs_pretrained = 2
patience = 2
max_epochs = 3
pretrain_lung_epochs = 1
pretrain_cls_epochs = 1
augment = false
"#;

fn write_small_config(dir: &Path) {
    std::fs::write(dir.join("small.toml"), SMALL_CONFIG).unwrap();
}

/// All files under `dir`, relative path -> contents.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[schedule]\npatience = 99\n").unwrap();
    let out = run_in(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("schedule.patience"),
        "stderr should name the offending field: {stderr}"
    );
}

#[test]
fn missing_run_directory_is_a_runtime_error() {
    let out = bin().args(["eval", "--runs", "/nonexistent-popgat"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_bit_reproducible_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    for out_name in ["a", "b"] {
        let out = run_in(dir.path(), &["--config", "small.toml", "synth", "--out", out_name]);
        assert_success(&out);
    }
    let a = tree(&dir.path().join("a"));
    let b = tree(&dir.path().join("b"));
    assert!(a.contains_key("metadata.csv"));
    assert!(a.keys().any(|k| k.starts_with("volumes/")));
    assert_eq!(a, b, "same seed must write identical cohorts");
}

#[test]
fn seed_flag_changes_the_cohort() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    let base = &["--config", "small.toml"][..];
    assert_success(&run_in(dir.path(), &[base, &["synth", "--out", "a"]].concat()));
    assert_success(&run_in(
        dir.path(),
        &[base, &["--seed", "99", "synth", "--out", "c"]].concat(),
    ));
    assert_ne!(tree(&dir.path().join("a")), tree(&dir.path().join("c")));
}

#[test]
fn train_writes_twenty_runs_and_reproduces_reports_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    assert_success(&run_in(
        dir.path(),
        &["--config", "small.toml", "synth", "--out", "cohort"],
    ));
    for out_name in ["r1", "r2"] {
        let out = run_in(
            dir.path(),
            &["--config", "small.toml", "train", "--data", "cohort", "--out", out_name],
        );
        assert_success(&out);
    }
    let r1 = dir.path().join("r1");
    for outer in 0..5 {
        for inner in 0..4 {
            let run = r1.join(format!("{outer}_{inner}"));
            assert!(run.join("metrics.json").is_file(), "missing {}", run.display());
            assert!(run.join("predictions_icu.csv").is_file());
            assert!(run.join("history.csv").is_file());
        }
    }
    let report1 = std::fs::read(r1.join("report.json")).unwrap();
    let report2 = std::fs::read(dir.path().join("r2/report.json")).unwrap();
    assert_eq!(report1, report2, "reruns must reproduce the report byte for byte");

    // `eval` over the run directory must agree with the training report.
    let out = run_in(dir.path(), &["eval", "--runs", "r1"]);
    assert_success(&out);
    let again = std::fs::read(r1.join("report.json")).unwrap();
    let a: serde_json::Value = serde_json::from_slice(&report1).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&again).unwrap();
    assert_eq!(a["ap"], b["ap"]);
    assert_eq!(a["auc"], b["auc"]);
    assert_eq!(a["n_runs"], serde_json::json!(20));

    // The inner-loop ensemble reads the same artifacts.
    let out = run_in(dir.path(), &["ensemble", "--runs", "r1"]);
    assert_success(&out);
    let ens: serde_json::Value =
        serde_json::from_slice(&std::fs::read(r1.join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(ens["folds"].as_array().unwrap().len(), 5);
    for fold in ens["folds"].as_array().unwrap() {
        assert_eq!(fold["members"], serde_json::json!(4));
        assert!(fold["ensemble_ap"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn explain_exports_attention_rows_that_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = SMALL_CONFIG.replace("mlp-metadata", "u-gat");
    std::fs::write(dir.path().join("ugat.toml"), config).unwrap();
    assert_success(&run_in(
        dir.path(),
        &["--config", "ugat.toml", "synth", "--out", "cohort"],
    ));
    let out = run_in(
        dir.path(),
        &[
            "--config", "ugat.toml", "explain", "--data", "cohort", "--outer", "1", "--inner",
            "2", "--out", "ex",
        ],
    );
    assert_success(&out);
    let att: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ex/attention.json")).unwrap())
            .unwrap();
    let patients = att.as_array().unwrap();
    assert!(!patients.is_empty());
    let mut rows = 0usize;
    for p in patients {
        for matrix in p["export"]["head_averaged"].as_array().unwrap() {
            for row in matrix["rows"].as_array().unwrap() {
                let sum: f64 = row["neighbors"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|n| n["alpha"].as_f64().unwrap())
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sums to {sum}");
                rows += 1;
            }
        }
    }
    assert!(rows > 0);
}

#[test]
fn stats_tables_cover_every_feature_and_outcome() {
    let dir = tempfile::tempdir().unwrap();
    write_small_config(dir.path());
    let out = run_in(dir.path(), &["--config", "small.toml", "stats", "--out", "st"]);
    assert_success(&out);
    let rows: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("st/stats.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    // 14 metadata columns + 4 radiomics features, for 3 outcomes.
    assert_eq!(rows.len(), 18 * 3);
    for row in rows {
        for key in ["welch_p", "pooled_p"] {
            let p = row[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&p), "{key} = {p}");
        }
        assert!(row["positive"]["n"].as_u64().unwrap() >= 2);
    }
}
