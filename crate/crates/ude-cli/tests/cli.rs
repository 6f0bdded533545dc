//! End-to-end tests of the `ude` binary: file outputs, exit codes, and
//! byte-level idempotence of the artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ude")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .env("UDE_LOG", "warn")
        .args(args)
        .output()
        .expect("failed to spawn ude")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let base = "\
seed = 3

[train.source]
max_epochs = 30

[train.da]
max_epochs = 30

[train.kdde]
max_epochs = 30
";
    std::fs::write(&path, format!("{base}\n{extra}")).unwrap();
    path
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("missing {rel}: {e}"))
}

fn line_count(bytes: &[u8]) -> usize {
    bytes.iter().filter(|&&b| b == b'\n').count()
}

#[test]
fn gen_writes_four_csvs_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run_in(tmp.path(), &["--config", "exp.toml", "gen"]));

    let mut first = Vec::new();
    for name in [
        "data/source_train.csv",
        "data/source_test.csv",
        "data/target_train.csv",
        "data/target_test.csv",
    ] {
        let bytes = read(tmp.path(), name);
        // 200 rows + header
        assert_eq!(line_count(&bytes), 201, "{name}");
        first.push(bytes);
    }
    // unlabeled target train: label cells empty
    let target_train = String::from_utf8(first[2].clone()).unwrap();
    let row = target_train.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[2], "", "target train must be unlabeled");
    assert_eq!(fields[3], "target");

    assert_ok(&run_in(tmp.path(), &["--config", "exp.toml", "gen"]));
    for (name, bytes) in [
        "data/source_train.csv",
        "data/source_test.csv",
        "data/target_train.csv",
        "data/target_test.csv",
    ]
    .iter()
    .zip(&first)
    {
        assert_eq!(
            &read(tmp.path(), name),
            bytes,
            "{name} changed across reruns"
        );
    }
}

#[test]
fn runs_without_config_using_documented_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_in(tmp.path(), &["gen"]));
    // documented defaults: data dir "data", 400 rows split 1:1 per domain
    assert_eq!(line_count(&read(tmp.path(), "data/source_train.csv")), 201);
    // a tiny override config must see the same data (same default seed 7)
    std::fs::write(
        tmp.path().join("tiny.toml"),
        "[train.source]\nmax_epochs = 2\n",
    )
    .unwrap();
    let first = read(tmp.path(), "data/source_train.csv");
    assert_ok(&run_in(tmp.path(), &["--config", "tiny.toml", "gen"]));
    assert_eq!(read(tmp.path(), "data/source_train.csv"), first);
    // weights land in the default out dir
    assert_ok(&run_in(
        tmp.path(),
        &["--config", "tiny.toml", "train", "--stage", "source"],
    ));
    read(tmp.path(), "runs/source_model.json");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "sead = 7\n").unwrap();
    let out = run_in(tmp.path(), &["--config", "bad.toml", "gen"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sead"));
}

#[test]
fn invalid_noise_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[data]\nnoise_sd = -0.5\n").unwrap();
    let out = run_in(tmp.path(), &["--config", "bad.toml", "gen"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn kdde_without_teachers_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run_in(tmp.path(), &["--config", "exp.toml", "gen"]));
    let out = run_in(
        tmp.path(),
        &["--config", "exp.toml", "train", "--stage", "kdde"],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher-src"));
}

#[test]
fn numeric_divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("div.toml"),
        "[train.source]\nweight_decay = 1e200\nmax_epochs = 3\n",
    )
    .unwrap();
    assert_ok(&run_in(tmp.path(), &["--config", "div.toml", "gen"]));
    let out = run_in(
        tmp.path(),
        &["--config", "div.toml", "train", "--stage", "source"],
    );
    assert_eq!(exit_code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn training_artifacts_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run_in(tmp.path(), &["--config", "exp.toml", "gen"]));
    assert_ok(&run_in(
        tmp.path(),
        &["--config", "exp.toml", "train", "--stage", "source"],
    ));
    let weights = read(tmp.path(), "runs/source_model.json");
    assert_ok(&run_in(
        tmp.path(),
        &["--config", "exp.toml", "train", "--stage", "source"],
    ));
    assert_eq!(
        read(tmp.path(), "runs/source_model.json"),
        weights,
        "weights must be byte-identical across reruns"
    );
}

#[test]
fn full_pipeline_emits_reports_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "[eval]\nretrieval_n = [5]\n\n[eval.boundary]\nx_min = -2.0\nx_max = 2.4\ny_min = -2.0\ny_max = 2.0\nresolution = 10\n",
    );
    let cfg = ["--config", "exp.toml"];

    assert_ok(&run_in(tmp.path(), &[&cfg[..], &["gen"]].concat()));
    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["train", "--stage", "source"]].concat(),
    ));
    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["train", "--stage", "da"]].concat(),
    ));
    assert_ok(&run_in(
        tmp.path(),
        &[
            &cfg[..],
            &[
                "train",
                "--stage",
                "kdde",
                "--teacher-src",
                "runs/source_model.json",
                "--teacher-da",
                "runs/da_model.json",
            ],
        ]
        .concat(),
    ));
    for name in [
        "runs/source_model.json",
        "runs/source_model.run.json",
        "runs/da_model.json",
        "runs/da_model.run.json",
        "runs/kdde_model.json",
        "runs/kdde_model.run.json",
    ] {
        read(tmp.path(), name);
    }

    assert_ok(&run_in(
        tmp.path(),
        &[
            &cfg[..],
            &[
                "eval",
                "--teacher-src",
                "runs/source_model.json",
                "--teacher-da",
                "runs/da_model.json",
                "runs/kdde_model.json",
            ],
        ]
        .concat(),
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&read(tmp.path(), "runs/eval_kdde_model.json")).unwrap();
    let domains = report["per_domain_accuracy"].as_object().unwrap();
    assert!(domains.contains_key("source") && domains.contains_key("target"));
    let mean = (domains["source"].as_f64().unwrap() + domains["target"].as_f64().unwrap()) / 2.0;
    assert!((report["expanded_accuracy"].as_f64().unwrap() - mean).abs() < 1e-12);

    // oracle selector's per-domain numbers equal the members' numbers
    let oracle: serde_json::Value =
        serde_json::from_slice(&read(tmp.path(), "runs/eval_selector_oracle.json")).unwrap();
    let member_src: serde_json::Value =
        serde_json::from_slice(&read(tmp.path(), "runs/eval_member_src.json")).unwrap();
    let member_da: serde_json::Value =
        serde_json::from_slice(&read(tmp.path(), "runs/eval_member_da.json")).unwrap();
    assert_eq!(
        oracle["per_domain_accuracy"]["source"],
        member_src["per_domain_accuracy"]["source"]
    );
    assert_eq!(
        oracle["per_domain_accuracy"]["target"],
        member_da["per_domain_accuracy"]["target"]
    );
    for name in [
        "runs/eval_selector.json",
        "runs/eval_ensemble.json",
        "runs/retrieval_kdde_model_p5.csv",
        "runs/domain_clf.json",
    ] {
        read(tmp.path(), name);
    }

    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["export-features", "runs/kdde_model.json"]].concat(),
    ));
    let feats = read(tmp.path(), "runs/features_kdde_model_source.csv");
    assert_eq!(line_count(&feats), 201);
    let header =
        String::from_utf8(feats[..feats.iter().position(|&b| b == b'\n').unwrap()].to_vec())
            .unwrap();
    assert!(header.starts_with("z0,") && header.ends_with("label,domain"));
    assert_eq!(header.split(',').count(), 34); // 32 features + label + domain

    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["export-boundary", "runs/kdde_model.json"]].concat(),
    ));
    let boundary = read(tmp.path(), "runs/boundary_kdde_model.csv");
    assert_eq!(line_count(&boundary), 101); // 10x10 grid + header
}

#[test]
fn sweep_lambda_emits_table_with_bn_flag() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let cfg = ["--config", "exp.toml"];
    assert_ok(&run_in(tmp.path(), &[&cfg[..], &["gen"]].concat()));
    assert_ok(&run_in(
        tmp.path(),
        &[
            &cfg[..],
            &["sweep-lambda", "--lambdas", "0,10", "--seeds", "3,4"],
        ]
        .concat(),
    ));
    let csv = String::from_utf8(read(tmp.path(), "runs/sweep_lambda.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "header + 2 lambdas x 2 seeds: {csv}");
    assert_eq!(
        lines[0],
        "lambda,seed,acc_source,acc_target,acc_expanded,bn_running_mean_max_delta,bn_stats_differ"
    );
    for row in &lines[1..] {
        assert!(
            row.ends_with(",true"),
            "target batches must move BN stats: {row}"
        );
    }
    // one row per cell, ordered by (lambda, seed)
    assert!(lines[1].starts_with("0,3,"));
    assert!(lines[2].starts_with("0,4,"));
    assert!(lines[3].starts_with("10,3,"));
    assert!(lines[4].starts_with("10,4,"));
    // per-cell artifacts in their own subdirectories
    read(tmp.path(), "runs/sweep/lambda_0_seed_3/weights.json");
    read(tmp.path(), "runs/sweep/lambda_10_seed_4/run.json");
}

#[test]
fn sweep_lambda_default_grid_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("exp.toml"),
        "seed = 3\n[train.da]\nmethod = \"ddc\"\nmax_epochs = 4\n",
    )
    .unwrap();
    let cfg = ["--config", "exp.toml"];
    assert_ok(&run_in(tmp.path(), &[&cfg[..], &["gen"]].concat()));
    assert_ok(&run_in(tmp.path(), &[&cfg[..], &["sweep-lambda"]].concat()));
    let csv = String::from_utf8(read(tmp.path(), "runs/sweep_lambda.csv")).unwrap();
    let lambdas: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(lambdas, ["0", "0.01", "0.1", "1", "10", "20", "100"]);
}

#[test]
fn eval_reports_are_reproducible_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let cfg = ["--config", "exp.toml"];
    assert_ok(&run_in(tmp.path(), &[&cfg[..], &["gen"]].concat()));
    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["train", "--stage", "source"]].concat(),
    ));
    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["eval", "runs/source_model.json"]].concat(),
    ));
    let first = read(tmp.path(), "runs/eval_source_model.json");
    assert_ok(&run_in(
        tmp.path(),
        &[&cfg[..], &["eval", "runs/source_model.json"]].concat(),
    ));
    assert_eq!(read(tmp.path(), "runs/eval_source_model.json"), first);
}
