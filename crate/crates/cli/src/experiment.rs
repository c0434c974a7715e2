//! Replicate execution, diagnostics and report regeneration.

use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zostack::diagnostics::{error_decomposition, loglog_slope, shadow_trajectory};
use zostack::linalg::{norm, norm_sq};
use zostack::solver::min_grad_stationarity;
use zostack::{run_algorithm, RngStream, RunTrace};

use crate::config::{BuiltProblem, Cell, CellKey, ExperimentConfig};
use crate::output::{self, Failure};
use crate::CliError;

/// `run` executes only the base cell; `sweep` executes the full grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Sweep,
}

/// Per-run result persisted next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cell_index: usize,
    pub cell: String,
    pub key: CellKey,
    pub seed: u64,
    pub inner_iterations: usize,
    pub d: usize,
    pub best_t: Option<usize>,
    pub min_grad_sq: Option<f64>,
    pub final_ftilde: Option<f64>,
    pub final_x: Vec<f64>,
    pub trace_file: String,
    pub warnings: Vec<String>,
}

pub struct Outcome {
    pub out_dir: PathBuf,
    pub summaries: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
    pub manifest: output::Manifest,
}

fn trace_path(key: &CellKey, seed: u64) -> PathBuf {
    PathBuf::from("traces").join(key.label()).join(format!("seed_{seed}.csv"))
}

fn summary_path(key: &CellKey, seed: u64) -> PathBuf {
    PathBuf::from("summaries").join(key.label()).join(format!("seed_{seed}.json"))
}

fn run_one(cell: &Cell, seed: u64, out_dir: &Path) -> Result<(RunSummary, RunTrace), Failure> {
    let fail = |error: String| Failure {
        cell: cell.key.label(),
        seed,
        error,
    };
    let mut solver = cell.solver.clone();
    solver.seed = seed;
    let leader = cell.problem.leader();
    let trace = run_algorithm(leader, cell.problem.followers(), &solver).map_err(|e| fail(e.to_string()))?;
    let best = min_grad_stationarity(&trace, leader).ok();
    let summary = RunSummary {
        cell_index: cell.index,
        cell: cell.key.label(),
        key: cell.key,
        seed,
        inner_iterations: trace.inner_iterations,
        d: leader.leader_dim(),
        best_t: best.map(|b| b.0),
        min_grad_sq: best.map(|b| b.1),
        final_ftilde: leader.hyper_objective(&trace.final_x),
        final_x: trace.final_x.as_slice().to_vec(),
        trace_file: trace_path(&cell.key, seed).to_string_lossy().replace('\\', "/"),
        warnings: trace.warnings.clone(),
    };
    output::write_file(out_dir, &trace_path(&cell.key, seed), output::trace_csv(&trace).as_bytes())
        .map_err(|e| fail(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    output::write_file(out_dir, &summary_path(&cell.key, seed), json.as_bytes()).map_err(|e| fail(e.to_string()))?;
    debug!("cell {} seed {seed}: done", cell.key.label());
    Ok((summary, trace))
}

fn build_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    builder
        .build()
        .map_err(|e| CliError::Io(format!("cannot start worker pool: {e}")))
}

type RunResult = Result<(RunSummary, RunTrace), Failure>;

struct Executed {
    cells: Vec<Cell>,
    results: Vec<(usize, u64, RunResult)>,
}

fn execute_runs(cfg: &ExperimentConfig, mode: Mode, out_dir: &Path, jobs: Option<usize>) -> Result<Executed, CliError> {
    let keys = cfg.cells(mode == Mode::Sweep);
    if mode == Mode::Run && cfg.sweep.is_some() {
        warn!("config has a sweep section; `run` executes only the base cell");
    }
    let cells = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| cfg.build_cell(i, k))
        .collect::<Result<Vec<_>, _>>()?;
    let tasks: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c.index, s)))
        .collect();
    info!("{} cells x {} seeds = {} runs", cells.len(), cfg.seeds.len(), tasks.len());
    let pool = build_pool(jobs)?;
    // `collect` on an indexed parallel iterator preserves task order, so results
    // come back sorted by (cell, seed) regardless of scheduling.
    let results = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ci, seed)| (ci, seed, run_one(&cells[ci], seed, out_dir)))
            .collect()
    });
    Ok(Executed { cells, results })
}

fn finish(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    executed: &Executed,
    extra_files: Vec<PathBuf>,
) -> Result<Outcome, CliError> {
    let mut files = extra_files;
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (ci, seed, res) in &executed.results {
        match res {
            Ok((summary, _)) => {
                let cell = &executed.cells[*ci];
                files.push(trace_path(&cell.key, *seed));
                files.push(summary_path(&cell.key, *seed));
                summaries.push(summary.clone());
            }
            Err(f) => {
                warn!("cell {} seed {} aborted: {}", f.cell, f.seed, f.error);
                failures.push(f.clone());
            }
        }
    }
    output::write_file(out_dir, Path::new(output::AGGREGATE), output::aggregate_csv(&output::aggregate(&summaries)).as_bytes())?;
    output::write_file(out_dir, Path::new(output::LONG), output::long_csv(&summaries).as_bytes())?;
    files.push(PathBuf::from(output::AGGREGATE));
    files.push(PathBuf::from(output::LONG));
    let config = serde_json::to_value(cfg).expect("config serializes");
    let failed = failures.len();
    let manifest = output::write_manifest(out_dir, config, &files, failures)?;
    if failed > 0 {
        return Err(CliError::RunAbort {
            failed,
            total: executed.results.len(),
        });
    }
    Ok(Outcome {
        out_dir: out_dir.to_path_buf(),
        summaries,
        files,
        manifest,
    })
}

/// Executes all runs of the experiment and writes traces, summaries, the
/// aggregate and long tables and the manifest. Rerunning an identical config
/// reproduces every file byte for byte.
pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode, out_dir: &Path, jobs: Option<usize>) -> Result<Outcome, CliError> {
    let executed = execute_runs(cfg, mode, out_dir, jobs)?;
    finish(cfg, out_dir, &executed, Vec::new())
}

/// Outcome of one diagnostic check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub name: String,
    pub scope: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

fn traces_of(executed: &Executed, cell: usize) -> Vec<(u64, &RunTrace)> {
    executed
        .results
        .iter()
        .filter(|(ci, _, _)| *ci == cell)
        .filter_map(|(_, seed, r)| r.as_ref().ok().map(|(_, t)| (*seed, t)))
        .collect()
}

fn decomposition_check(cfg: &ExperimentConfig, cell: &Cell, traces: &[(u64, &RunTrace)]) -> DiagnosticResult {
    let leader = cell.problem.leader();
    let d = leader.leader_dim() as f64;
    let ell = leader.constants().ell_ftilde;
    let diag = &cfg.diagnostics;
    let mut e1 = Vec::new();
    let mut e1_bound = Vec::new();
    let mut mc_var = Vec::new();
    let mut e2 = Vec::new();
    let mut e3 = Vec::new();
    let mut lipschitz: f64 = 0.0;
    for (seed, trace) in traces {
        let total = trace.rounds.len();
        let picks = diag.decomposition_rounds.clamp(1, total);
        let mut sub = (*trace).clone();
        sub.rounds = (0..picks).map(|i| trace.rounds[i * total / picks].clone()).collect();
        let mut rng = RngStream::new(*seed, 1);
        let dec = match error_decomposition(leader, &sub, diag.n_mc, &mut rng) {
            Ok(dec) => dec,
            Err(e) => {
                return DiagnosticResult {
                    name: "error_decomposition".into(),
                    scope: cell.key.label(),
                    passed: false,
                    detail: serde_json::json!({ "error": e.to_string() }),
                }
            }
        };
        for (r, errs) in sub.rounds.iter().zip(&dec.rounds) {
            e1.push(norm_sq(&errs.e1));
            mc_var.push(errs.mc_variance());
            e2.push(norm_sq(&errs.e2));
            e3.push(norm_sq(&errs.e3));
            if let Some(ell) = ell {
                e1_bound.push((ell * r.delta * d).powi(2) / 4.0);
                lipschitz = lipschitz.max(norm(&errs.hypergradient) + ell * r.delta);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_e1, mean_e2, mean_var) = (mean(&e1), mean(&e2), mean(&mc_var));
    let (e1_ok, e2_ok, bound1, bound2) = if ell.is_some() {
        let b1 = mean(&e1_bound);
        let b2 = 4.0 * d * d * lipschitz * lipschitz;
        (mean_e1 <= b1 + 3.0 * mean_var, mean_e2 <= b2, Some(b1), Some(b2))
    } else {
        (false, false, None, None)
    };
    DiagnosticResult {
        name: "error_decomposition".into(),
        scope: cell.key.label(),
        passed: e1_ok && e2_ok,
        detail: serde_json::json!({
            "mean_e1_sq": mean_e1,
            "e1_bound": bound1,
            "mc_variance": mean_var,
            "mean_e2_sq": mean_e2,
            "e2_bound": bound2,
            "mean_e3_sq": mean(&e3),
            "note": if ell.is_none() { "smoothness constant unknown; bounds not checkable" } else { "" },
        }),
    }
}

fn shadow_check(cfg: &ExperimentConfig, cell: &Cell, traces: &[(u64, &RunTrace)]) -> DiagnosticResult {
    let diag = &cfg.diagnostics;
    let leader = cell.problem.leader();
    let mut sups = [0.0f64; 2];
    for (_, trace) in traces {
        for (slot, &anchor) in diag.shadow_anchors.iter().enumerate() {
            match shadow_trajectory(leader, trace, anchor, diag.shadow_horizon) {
                Ok(s) => sups[slot] += s.sup_gap() / traces.len() as f64,
                Err(e) => {
                    return DiagnosticResult {
                        name: "shadow".into(),
                        scope: cell.key.label(),
                        passed: false,
                        detail: serde_json::json!({ "error": e.to_string() }),
                    }
                }
            }
        }
    }
    DiagnosticResult {
        name: "shadow".into(),
        scope: cell.key.label(),
        passed: sups[1] < sups[0],
        detail: serde_json::json!({
            "anchors": diag.shadow_anchors,
            "horizon": diag.shadow_horizon,
            "mean_sup_gap": sups,
        }),
    }
}

fn escape_check(cfg: &ExperimentConfig, cell: &Cell, traces: &[(u64, &RunTrace)]) -> DiagnosticResult {
    let eps = cfg.diagnostics.escape_epsilon;
    let escaped = traces
        .iter()
        .filter(|(_, trace)| {
            let total = trace.rounds.len();
            (3 * total / 4..=total).all(|t| norm_sq(trace.iterate(t).expect("in range")) > eps)
        })
        .count();
    let fraction = escaped as f64 / traces.len().max(1) as f64;
    DiagnosticResult {
        name: "saddle_escape".into(),
        scope: cell.key.label(),
        passed: matches!(cell.problem, BuiltProblem::Saddle(..)) && fraction >= cfg.diagnostics.escape_fraction,
        detail: serde_json::json!({ "escaped": escaped, "runs": traces.len(), "epsilon": eps }),
    }
}

fn rate_checks(cfg: &ExperimentConfig, summaries: &[RunSummary]) -> Vec<DiagnosticResult> {
    let rows = output::aggregate(summaries);
    // Group cells that differ only in T.
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in &rows {
        let key = summaries.iter().find(|s| s.cell_index == row.cell_index).expect("row has runs").key;
        let scope = CellKey { rounds: 0, ..key }.label().replacen("T0_", "", 1);
        let Some(mean) = row.min_grad_sq_mean else { continue };
        match groups.iter_mut().find(|(s, _)| *s == scope) {
            Some((_, pts)) => pts.push((row.rounds as f64, mean)),
            None => groups.push((scope, vec![(row.rounds as f64, mean)])),
        }
    }
    let [lo, hi] = cfg.diagnostics.rate_slope;
    if groups.is_empty() {
        return vec![DiagnosticResult {
            name: "rate_fit".into(),
            scope: "all".into(),
            passed: false,
            detail: serde_json::json!({ "error": "no cells with a closed-form hyper-gradient" }),
        }];
    }
    groups
        .into_iter()
        .map(|(scope, pts)| match loglog_slope(&pts) {
            Ok(slope) => DiagnosticResult {
                name: "rate_fit".into(),
                scope,
                passed: (lo..=hi).contains(&slope),
                detail: serde_json::json!({ "slope": slope, "range": [lo, hi], "points": pts }),
            },
            Err(e) => DiagnosticResult {
                name: "rate_fit".into(),
                scope,
                passed: false,
                detail: serde_json::json!({ "error": e.to_string() }),
            },
        })
        .collect()
}

/// Runs the experiment like `sweep`, then evaluates every enabled diagnostic on
/// the traces and writes `diagnostics.json`. Stored trace files from an earlier
/// run are compared byte for byte before being overwritten.
pub fn diagnose(cfg: &ExperimentConfig, out_dir: &Path, jobs: Option<usize>) -> Result<(Outcome, Vec<DiagnosticResult>), CliError> {
    if !cfg.diagnostics.any() {
        return Err(CliError::Config("diagnostics: no diagnostic is enabled".into()));
    }
    let stored: Vec<(PathBuf, Option<Vec<u8>>)> = cfg
        .cells(true)
        .iter()
        .flat_map(|k| cfg.seeds.iter().map(move |&s| trace_path(k, s)))
        .map(|p| {
            let previous = std::fs::read(out_dir.join(&p)).ok();
            (p, previous)
        })
        .collect();
    let executed = execute_runs(cfg, Mode::Sweep, out_dir, jobs)?;

    let mut results = Vec::new();
    let mismatched: Vec<String> = stored
        .iter()
        .filter_map(|(p, prev)| {
            let prev = prev.as_ref()?;
            let now = std::fs::read(out_dir.join(p)).ok()?;
            (&now != prev).then(|| p.to_string_lossy().into_owned())
        })
        .collect();
    if stored.iter().any(|(_, prev)| prev.is_some()) {
        results.push(DiagnosticResult {
            name: "stored_traces_reproduced".into(),
            scope: "all".into(),
            passed: mismatched.is_empty(),
            detail: serde_json::json!({ "mismatched": mismatched }),
        });
    }
    let diag = &cfg.diagnostics;
    for cell in &executed.cells {
        let traces = traces_of(&executed, cell.index);
        if traces.is_empty() {
            continue;
        }
        if diag.error_decomposition {
            results.push(decomposition_check(cfg, cell, &traces));
        }
        if diag.shadow {
            results.push(shadow_check(cfg, cell, &traces));
        }
        if diag.saddle_escape {
            results.push(escape_check(cfg, cell, &traces));
        }
    }
    let summaries: Vec<RunSummary> = executed
        .results
        .iter()
        .filter_map(|(_, _, r)| r.as_ref().ok().map(|(s, _)| s.clone()))
        .collect();
    if diag.rate_fit {
        results.extend(rate_checks(cfg, &summaries));
    }
    let mut text = serde_json::to_string_pretty(&results).expect("results serialize");
    text.push('\n');
    output::write_file(out_dir, Path::new("diagnostics.json"), text.as_bytes())?;
    let outcome = finish(cfg, out_dir, &executed, vec![PathBuf::from("diagnostics.json")])?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} [{}]", r.name, r.scope))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Diagnostic(failed.join(", ")));
    }
    Ok((outcome, results))
}

fn collect_summaries(dir: &Path, out: &mut Vec<RunSummary>) -> Result<(), CliError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_summaries(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path)?;
            let summary = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            out.push(summary);
        }
    }
    Ok(())
}

/// Rebuilds the aggregate and long tables from the run summaries stored in
/// `dir` and refreshes the manifest hashes.
pub fn report(dir: &Path) -> Result<Vec<output::AggregateRow>, CliError> {
    let manifest = output::read_manifest(dir)?;
    let mut summaries = Vec::new();
    let root = dir.join("summaries");
    if root.is_dir() {
        collect_summaries(&root, &mut summaries)?;
    }
    if summaries.is_empty() {
        return Err(CliError::Config(format!("no run summaries under {}", root.display())));
    }
    summaries.sort_by_key(|s| (s.cell_index, s.seed));
    let rows = output::aggregate(&summaries);
    output::write_file(dir, Path::new(output::AGGREGATE), output::aggregate_csv(&rows).as_bytes())?;
    output::write_file(dir, Path::new(output::LONG), output::long_csv(&summaries).as_bytes())?;
    let mut files: Vec<PathBuf> = manifest.files.iter().map(|f| PathBuf::from(&f.path)).collect();
    files.push(PathBuf::from(output::AGGREGATE));
    files.push(PathBuf::from(output::LONG));
    output::write_manifest(dir, manifest.config, &files, manifest.failures)?;
    Ok(rows)
}
