use std::path::Path;

use tss_core::eval;
use tss_core::experiment::{self, ExperimentConfig, RunResults, StreamConfig};
use tss_core::{StreamKind, TrainConfig, TssError, Variant};

fn small_config(out: &Path, kind: StreamKind, variants: Vec<Variant>) -> ExperimentConfig {
    ExperimentConfig {
        stream: StreamConfig {
            kind,
            n_tasks: 3,
            ..StreamConfig::default()
        },
        train: TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        },
        variants,
        seeds: vec![1, 2],
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    let cfg = small_config(
        &out,
        StreamKind::Heterogeneous,
        vec![Variant::Tss, Variant::Ncl],
    );
    let outcome = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(outcome.run_dirs.len(), 4);
    for f in ["config.json", "results.json", "report.csv", "summary.md"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let tss = out.join("tss-seed1");
    for f in [
        "config.json",
        "results.json",
        "report.csv",
        "train_report.json",
        "importance.tssi",
        "gates/task_000.tssg",
        "gates/task_002.tssg",
        "heads/task_002.tssh",
    ] {
        assert!(tss.join(f).is_file(), "{f}");
    }
    let ncl = out.join("ncl-seed2");
    assert!(!ncl.join("gates").exists());
    assert!(!ncl.join("importance.tssi").exists());
    assert!(ncl.join("heads/task_000.tssh").is_file());

    let echoed: experiment::RunConfig =
        serde_json::from_str(&std::fs::read_to_string(tss.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg.run_config(Variant::Tss, 1));

    let loaded = RunResults::load(&tss).unwrap();
    assert_eq!(loaded, outcome.runs[0]);
    assert_eq!(
        loaded.metrics.frozen_digest_before,
        loaded.metrics.frozen_digest_after
    );
}

#[test]
fn inspect_reports_and_names_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), StreamKind::Similar, vec![Variant::Tss]);
    experiment::run_experiment(&cfg).unwrap();
    let run = dir.path().join("tss-seed1");

    let text = experiment::inspect(&run).unwrap();
    assert!(text.contains("gates/task_000.tssg"), "{text}");
    assert!(text.contains("ones-fraction"));
    assert!(text.contains("histogram"));
    assert!(text.contains("CRC OK"));

    let gate = run.join("gates/task_001.tssg");
    let mut bytes = std::fs::read(&gate).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x01;
    std::fs::write(&gate, bytes).unwrap();
    match experiment::inspect(&run) {
        Err(TssError::Corrupt { path, .. }) => assert_eq!(path, gate),
        other => panic!("expected a corrupt-file error, got {other:?}"),
    }
}

#[test]
fn compare_averages_and_refuses_mismatched_streams() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let cfg = small_config(&sim, StreamKind::Similar, vec![Variant::Tss, Variant::One]);
    let outcome = experiment::run_experiment(&cfg).unwrap();

    let cmp = experiment::compare(&outcome.run_dirs).unwrap();
    let tss_row = cmp.rows.iter().find(|r| r.variant == "tss").unwrap();
    let by_hand: Vec<f64> = outcome
        .runs
        .iter()
        .filter(|r| r.config.variant == Variant::Tss)
        .map(|r| r.metrics.final_mean_accuracy)
        .collect();
    assert!((tss_row.final_mean - eval::mean(&by_hand)).abs() <= 1e-12);
    assert!(cmp.markdown.contains("| tss |"));

    let dis = dir.path().join("dis");
    let other = experiment::run_experiment(&small_config(
        &dis,
        StreamKind::Dissimilar,
        vec![Variant::Tss],
    ))
    .unwrap();
    let mixed = vec![outcome.run_dirs[0].clone(), other.run_dirs[0].clone()];
    assert!(matches!(
        experiment::compare(&mixed),
        Err(TssError::Config(_))
    ));
}
