use std::path::Path;
use std::process::Command;

use zostack_cli::config::ExperimentConfig;
use zostack_cli::output::{read_manifest, sha256_hex};
use zostack_cli::{report, run_experiment, CliError, Mode};

const QUAD: &str = r#"{"problem": {"kind": "quadratic", "d": 2},
    "solver": {"T": 64, "x0": [1.0, 1.0]}, "seeds": [3, 5, 8],
    "sweep": {"T": [32, 64], "K": [1, "auto"]}}"#;

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text, Path::new(".")).unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn zostack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_zostack"))
        .args(args)
        .env_remove("ZOSTACK_OUT_DIR")
        .output()
        .unwrap()
}

#[test]
fn sweep_is_reproducible_byte_for_byte() {
    let cfg = parse(QUAD);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_experiment(&cfg, Mode::Sweep, a.path(), Some(1)).unwrap().manifest;
    let mb = run_experiment(&cfg, Mode::Sweep, b.path(), Some(3)).unwrap().manifest;
    assert_eq!(ma, mb);
    for f in &ma.files {
        assert_eq!(std::fs::read(a.path().join(&f.path)).unwrap(), std::fs::read(b.path().join(&f.path)).unwrap());
    }
}

#[test]
fn seed_trace_does_not_depend_on_other_runs() {
    let alone = parse(
        r#"{"problem": {"kind": "quadratic", "d": 2},
            "solver": {"T": 64, "x0": [1.0, 1.0]}, "seeds": [5]}"#,
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&alone, Mode::Run, a.path(), Some(1)).unwrap();
    run_experiment(&parse(QUAD), Mode::Sweep, b.path(), None).unwrap();
    let rel = "traces/T64_Kauto/seed_5.csv";
    assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&parse(QUAD), Mode::Sweep, dir.path(), None).unwrap();
    assert_eq!(outcome.summaries.len(), 4 * 3);
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.status, "ok");
    assert_eq!(manifest.files.len(), 2 * 12 + 2);
    for f in &manifest.files {
        let bytes = std::fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(f.sha256, sha256_hex(&bytes), "{}", f.path);
        assert_eq!(f.bytes, bytes.len() as u64);
    }
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4);
    assert!(agg.starts_with("T,K,d,seed_count,min_grad_sq_mean,min_grad_sq_stderr,final_ftilde_mean"));
}

#[test]
fn report_rebuilds_tables_from_summaries() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&parse(QUAD), Mode::Sweep, dir.path(), None).unwrap();
    let original = std::fs::read(dir.path().join("aggregate.csv")).unwrap();
    std::fs::remove_file(dir.path().join("aggregate.csv")).unwrap();
    let rows = report(dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(std::fs::read(dir.path().join("aggregate.csv")).unwrap(), original);
}

#[test]
fn routing_run_lowers_the_leader_objective() {
    let cfg = parse(
        r#"{"problem": {"kind": "routing", "instance": {
                "edges": [{"id": 1, "a": 1.0, "b": 0.0}, {"id": 2, "a": 0.0, "b": 1.0}],
                "od_pairs": [{"demand": 1.0, "paths": [[1], [2]]}], "lambda": 0.1}},
            "solver": {"T": 256}, "replicates": 2}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&cfg, Mode::Run, dir.path(), None).unwrap();
    for s in &outcome.summaries {
        assert!(s.final_ftilde.unwrap() < 0.8, "{:?}", s.final_ftilde);
    }
}

#[test]
fn diverging_run_is_reported_in_the_manifest() {
    let cfg = parse(
        r#"{"problem": {"kind": "strict_saddle", "quartic": 1.0},
            "solver": {"T": 50, "eta_bar": 1e150, "x0": [1.0, 1.0]}, "seeds": [0]}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, Mode::Run, dir.path(), None).err().unwrap();
    assert!(matches!(err, CliError::RunAbort { failed: 1, total: 1 }));
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.status, "failed");
    assert_eq!(manifest.failures.len(), 1);
}

#[test]
fn binary_run_and_report_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), QUAD);
    let out = dir.path().join("out");
    let run = zostack(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("manifest.json").is_file());
    let rep = zostack(&["report", out.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let bad = write_config(dir.path(), r#"{"problem": {"kind": "quadratic"}, "solver": {"T": 0}}"#);
    let r = zostack(&["run", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!r.stderr.is_empty());

    let missing = zostack(&["run", dir.path().join("nope.json").to_str().unwrap(), "--out", out]);
    assert_eq!(missing.status.code(), Some(2));

    let diverge = write_config(
        dir.path(),
        r#"{"problem": {"kind": "strict_saddle", "quartic": 1.0},
            "solver": {"T": 50, "eta_bar": 1e150, "x0": [1.0, 1.0]}, "seeds": [0]}"#,
    );
    assert_eq!(zostack(&["run", diverge.to_str().unwrap(), "--out", out]).status.code(), Some(3));

    let impossible = write_config(
        dir.path(),
        r#"{"problem": {"kind": "quadratic"}, "solver": {"T": 32, "x0": [1.0, 1.0]},
            "seeds": [0, 1], "sweep": {"T": [16, 32]},
            "diagnostics": {"rate_fit": true, "rate_slope": [5.0, 6.0]}}"#,
    );
    let r = zostack(&["diagnose", impossible.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(4));
    assert!(dir.path().join("out/diagnostics.json").is_file());
}
