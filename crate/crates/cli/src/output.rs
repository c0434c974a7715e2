//! File formats: trace CSV, aggregate and long-format tables, manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zostack::RunTrace;

use crate::experiment::RunSummary;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const AGGREGATE: &str = "aggregate.csv";
pub const LONG: &str = "long.csv";

/// Shortest decimal representation that round-trips the `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// One row per round:
/// `t,eta,delta,v[0..d),x[0..d),f_hat,f_base,est_norm,grad_norm_sq`.
/// `grad_norm_sq` is empty when the problem has no closed-form hyper-gradient.
pub fn trace_csv(trace: &RunTrace) -> String {
    let d = trace.config.x0.dim();
    let mut out = String::from("t,eta,delta");
    for i in 0..d {
        let _ = write!(out, ",v[{i}]");
    }
    for i in 0..d {
        let _ = write!(out, ",x[{i}]");
    }
    out.push_str(",f_hat,f_base,est_norm,grad_norm_sq\n");
    for r in &trace.rounds {
        let _ = write!(out, "{},{},{}", r.t, fmt_f64(r.eta), fmt_f64(r.delta));
        for v in &r.v {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for x in r.x.iter() {
            let _ = write!(out, ",{}", fmt_f64(*x));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{}",
            fmt_f64(r.f_hat),
            fmt_f64(r.f_base),
            fmt_f64(zostack::linalg::norm(&r.estimate)),
            fmt_opt(r.grad_norm_sq)
        );
    }
    out
}

fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    (Some(mean), stderr)
}

/// Per-cell row of seed aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub cell_index: usize,
    pub rounds: usize,
    pub inner_iterations: usize,
    pub d: usize,
    pub seed_count: usize,
    pub min_grad_sq_mean: Option<f64>,
    pub min_grad_sq_stderr: Option<f64>,
    pub final_ftilde_mean: Option<f64>,
}

/// Groups summaries (already sorted by cell, then seed) into per-cell rows.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    let mut start = 0;
    while start < summaries.len() {
        let cell = summaries[start].cell_index;
        let end = start + summaries[start..].iter().take_while(|s| s.cell_index == cell).count();
        let group = &summaries[start..end];
        let grads: Vec<f64> = group.iter().filter_map(|s| s.min_grad_sq).collect();
        let finals: Vec<f64> = group.iter().filter_map(|s| s.final_ftilde).collect();
        let (gm, gs) = if grads.len() == group.len() { mean_stderr(&grads) } else { (None, None) };
        let fm = if finals.len() == group.len() { mean_stderr(&finals).0 } else { None };
        rows.push(AggregateRow {
            cell_index: cell,
            rounds: group[0].key.rounds,
            inner_iterations: group[0].inner_iterations,
            d: group[0].d,
            seed_count: group.len(),
            min_grad_sq_mean: gm,
            min_grad_sq_stderr: gs,
            final_ftilde_mean: fm,
        });
        start = end;
    }
    rows
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("T,K,d,seed_count,min_grad_sq_mean,min_grad_sq_stderr,final_ftilde_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.rounds,
            r.inner_iterations,
            r.d,
            r.seed_count,
            fmt_opt(r.min_grad_sq_mean),
            fmt_opt(r.min_grad_sq_stderr),
            fmt_opt(r.final_ftilde_mean)
        );
    }
    out
}

/// Plot-ready long format: one row per (run, metric).
pub fn long_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from("cell,T,K,d,rho,lambda,seed,metric,value\n");
    for s in summaries {
        let metrics = [("min_grad_sq", s.min_grad_sq), ("final_ftilde", s.final_ftilde)];
        for (name, value) in metrics {
            if let Some(v) = value {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{name},{}",
                    s.cell,
                    s.key.rounds,
                    s.inner_iterations,
                    s.d,
                    fmt_opt(s.key.rho),
                    fmt_opt(s.key.lambda),
                    s.seed,
                    fmt_f64(v)
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub library: String,
    pub version: String,
    pub status: String,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
    pub failures: Vec<Failure>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn rel_string(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes `contents` to `root/rel`, creating parent directories.
pub fn write_file(root: &Path, rel: &Path, contents: &[u8]) -> Result<(), CliError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Hashes the listed files (relative to `root`) and writes the manifest.
pub fn write_manifest(
    root: &Path,
    config: serde_json::Value,
    files: &[PathBuf],
    failures: Vec<Failure>,
) -> Result<Manifest, CliError> {
    let mut sorted: Vec<&PathBuf> = files.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut entries = Vec::with_capacity(sorted.len());
    for rel in sorted {
        let bytes = std::fs::read(root.join(rel))
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", rel.display())))?;
        entries.push(FileEntry {
            path: rel_string(rel),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        library: "zostack".into(),
        version: zostack::VERSION.into(),
        status: if failures.is_empty() { "ok".into() } else { "failed".into() },
        config,
        files: entries,
        failures,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(root, Path::new(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest, CliError> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
