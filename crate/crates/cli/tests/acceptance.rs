//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status if any criterion fails.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use zostack::diagnostics::{error_decomposition, loglog_slope, shadow_trajectory};
use zostack::estimator::smoothed_gradient_mc;
use zostack::linalg::{axpy, distance, norm_sq};
use zostack::lower_level::{iterate_sensitivity_check, run_inner};
use zostack::problems::{
    quad_hypergradient, ExactResponder, QuadraticBilevel, RoutingInstance, StrictSaddleProblem, TrigBilevel,
};
use zostack::solver::min_grad_stationarity;
use zostack::{
    run_algorithm, FeasibleSet, FollowerProfile, FollowerSystem, InnerBudget, LeaderProblem, LeaderStrategy,
    RateCertificate, RngStream, RunTrace, ScheduleParams, SolverConfig,
};
use zostack_cli::config::ExperimentConfig;
use zostack_cli::{run_experiment, Mode};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Follower step with squared-distance contraction `rho` on unit curvature.
fn gamma_for(rho: f64) -> f64 {
    1.0 - rho.sqrt()
}

fn config(rounds: usize, inner: InnerBudget, eta_bar: f64, d: usize, seed: u64, x0: Vec<f64>, y0: Vec<f64>) -> SolverConfig {
    SolverConfig {
        rounds,
        inner,
        schedule: ScheduleParams::new(eta_bar, 0.5, d).unwrap(),
        seed,
        x0: LeaderStrategy::new(x0).unwrap(),
        y0: FollowerProfile::new(y0).unwrap(),
        record_inner: false,
    }
}

/// The rate benchmark: Gaussian coupling of scale ½, follower target 10·1 on a
/// ±100 box, started one unit away from the optimum in every coordinate.
fn rate_instance(d: usize) -> (QuadraticBilevel, Vec<f64>, f64) {
    let qb = QuadraticBilevel::gaussian(d, 0.5, 10.0, 100.0, 2024).unwrap();
    let x0 = qb.interior_optimum().iter().map(|v| v + 1.0).collect();
    let eta_bar = d as f64 / (4.0 * qb.constants().ell_ftilde.unwrap());
    (qb, x0, eta_bar)
}

fn c1_smoothed_gradient() -> Verdict {
    let qb = QuadraticBilevel::gaussian(4, 0.5, 10.0, 100.0, 1).unwrap();
    let mut points = RngStream::new(100, 0);
    let mut rng = RngStream::new(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x: Vec<f64> = (0..4).map(|_| 2.0 * points.standard_normal()).collect();
        let grad = quad_hypergradient(&qb, &x).unwrap();
        let mc = smoothed_gradient_mc(|z| qb.hyper_objective(z).unwrap(), &x, 0.25, 100_000, &mut rng).unwrap();
        for i in 0..4 {
            worst = worst.max((mc.mean[i] - grad[i]).abs() / mc.std_err[i]);
        }
    }
    verdict(worst <= 3.0, format!("max |MC mean - grad| / SE = {worst:.3} (limit 3)"))
}

fn c2_error_bounds() -> Verdict {
    let d = 4;
    let mut inst = RngStream::new(7, 0);
    let bmat: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| 0.5 * inst.standard_normal()).collect()).collect();
    let tb = TrigBilevel::new(d, bmat, vec![0.0; d], FeasibleSet::uniform_box(d, -100.0, 100.0).unwrap()).unwrap();
    let constants = tb.constants();
    let (ell, lip) = (constants.ell_ftilde.unwrap(), constants.l_ftilde.unwrap());
    let exact = ExactResponder::new(&tb, tb.followers(gamma_for(0.5)).unwrap()).unwrap();
    let eta_bar = d as f64 / (4.0 * ell);
    let mut e1 = Vec::new();
    let mut e1_bound = Vec::new();
    let mut mc_var = Vec::new();
    let mut e2 = Vec::new();
    let mut e3_zero = true;
    for seed in 0..10 {
        let cfg = config(256, InnerBudget::Auto, eta_bar, d, seed, vec![0.5; d], vec![0.0; d]);
        let mut trace = run_algorithm(&tb, &exact, &cfg).unwrap();
        trace.rounds = trace.rounds.iter().step_by(16).cloned().collect();
        let dec = error_decomposition(&tb, &trace, 10_000, &mut RngStream::new(seed, 1)).unwrap();
        for (r, errs) in trace.rounds.iter().zip(&dec.rounds) {
            e1.push(norm_sq(&errs.e1));
            e1_bound.push((ell * r.delta * d as f64).powi(2) / 4.0);
            mc_var.push(errs.mc_variance());
            e2.push(norm_sq(&errs.e2));
            e3_zero &= errs.e3.iter().all(|&v| v == 0.0);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let b1 = mean(&e1_bound) + 3.0 * mean(&mc_var);
    let b2 = 4.0 * (d * d) as f64 * lip * lip;
    let ok = mean(&e1) <= b1 && mean(&e2) <= b2 && e3_zero;
    verdict(
        ok,
        format!(
            "E|e1|^2 = {:.3e} <= {b1:.3e}; E|e2|^2 = {:.3e} <= {b2:.3e}; e3 == 0: {e3_zero}",
            mean(&e1),
            mean(&e2)
        ),
    )
}

fn seed_mean<F>(seeds: u64, f: F) -> f64
where
    F: Fn(u64) -> f64 + Sync,
{
    let values: Vec<f64> = (0..seeds).into_par_iter().map(&f).collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn c3_rate() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [2, 4] {
        let (qb, x0, eta_bar) = rate_instance(d);
        let followers = qb.followers(gamma_for(0.5)).unwrap();
        let points: Vec<(f64, f64)> = [64, 256, 1024, 4096]
            .iter()
            .map(|&t| {
                let m = seed_mean(20, |seed| {
                    let cfg = config(t, InnerBudget::Auto, eta_bar, d, seed, x0.clone(), vec![0.0; d]);
                    let trace = run_algorithm(&qb, &followers, &cfg).unwrap();
                    min_grad_stationarity(&trace, &qb).unwrap().1
                });
                (t as f64, m)
            })
            .collect();
        let slope = loglog_slope(&points).unwrap();
        ok &= (-0.7..=-0.3).contains(&slope);
        parts.push(format!("d={d}: slope {slope:.3}"));
    }
    verdict(ok, format!("{} (range [-0.7, -0.3])", parts.join(", ")))
}

fn late_plateau(trace: &RunTrace) -> f64 {
    let late = &trace.rounds[3 * trace.rounds.len() / 4..];
    late.iter().map(|r| r.grad_norm_sq.unwrap()).sum::<f64>() / late.len() as f64
}

fn c4_alpha_floor() -> Verdict {
    let d = 2;
    let (qb, x0, eta_bar) = rate_instance(d);
    let followers = qb.followers(gamma_for(0.5)).unwrap();
    let plateau = |k: usize| {
        seed_mean(20, |seed| {
            let cfg = config(2048, InnerBudget::Fixed(k), eta_bar, d, seed, x0.clone(), vec![0.0; d]);
            late_plateau(&run_algorithm(&qb, &followers, &cfg).unwrap())
        })
    };
    let (p2, p6) = (plateau(2), plateau(6));
    let ratio = p6 / p2;
    let target = 0.5f64.powi(4);
    let ok = ratio >= target / 10.0 && ratio <= target * 10.0;
    verdict(
        ok,
        format!("plateau K=2 {p2:.3e}, K=6 {p6:.3e}, ratio {ratio:.4} vs rho^4 = {target} (one decade)"),
    )
}

fn c5_inner_budget() -> Verdict {
    let poly = RateCertificate::polynomial(1.0, 1.0).unwrap().choose_inner_iterations(16, 1).unwrap();
    let exp = RateCertificate::exponential(1.0, 0.5).unwrap().choose_inner_iterations(10_000, 1).unwrap();
    verdict(poly == 4 && exp == 7, format!("polynomial K = {poly} (want 4), exponential K = {exp} (want 7)"))
}

fn c6_sensitivity() -> Verdict {
    let mut rng = RngStream::new(6, 0);
    let mut violations = 0;
    let mut tightest: f64 = 0.0;
    for _ in 0..100 {
        let d = 3;
        let bmat: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect();
        let qb = QuadraticBilevel::new(
            (0..d).map(|_| rng.standard_normal()).collect(),
            (0..d).map(|_| rng.standard_normal()).collect(),
            bmat,
            (0..d).map(|_| rng.standard_normal()).collect(),
            FeasibleSet::uniform_box(d, -2.0, 2.0).unwrap(),
        )
        .unwrap();
        let gamma = 0.05 + 0.9 * rng.standard_normal().abs().min(1.0);
        let sys = qb.followers(gamma).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let delta = 0.5 * rng.standard_normal().abs() + 1e-3;
        let x_hat = axpy(&x, delta, &rng.sample_unit_sphere(d).unwrap());
        let y0 = sys.project(&(0..d).map(|_| 2.0 * rng.standard_normal()).collect::<Vec<_>>()).unwrap();
        let k = 1 + (rng.standard_normal().abs() * 10.0) as usize;
        let check = iterate_sensitivity_check(&sys, &x, &x_hat, &y0, k).unwrap();
        if !check.holds() {
            violations += 1;
        }
        tightest = tightest.max(check.measured / check.bound);
    }
    verdict(violations == 0, format!("{violations} violations in 100 instances; max measured/bound {tightest:.3}"))
}

fn routing(text: &str) -> RoutingInstance {
    RoutingInstance::from_json(text).unwrap()
}

fn two_link(lambda: f64) -> RoutingInstance {
    routing(&format!(
        r#"{{"edges": [{{"id": 1, "a": 1.0, "b": 0.0}}, {{"id": 2, "a": 0.0, "b": 1.0}}],
            "od_pairs": [{{"demand": 1.0, "paths": [[1], [2]]}}], "lambda": {lambda}}}"#
    ))
}

fn c7_wardrop() -> Verdict {
    let three_path = routing(
        r#"{"edges": [{"id": "a", "a": 1.0, "b": 0.0}, {"id": "b", "a": 2.0, "b": 0.1},
                      {"id": "c", "a": 1.0, "b": 0.2}],
            "od_pairs": [{"demand": 1.0, "paths": [["a"], ["b"], ["a", "c"]]}]}"#,
    );
    let cases = [
        (two_link(0.0), vec![0.0, 0.0], Some(vec![1.0, 0.0])),
        (two_link(0.0), vec![0.5, 0.0], Some(vec![0.5, 0.5])),
        (three_path.clone(), vec![0.0, 0.0, 0.0], None),
        (three_path, vec![0.3, 0.0, -0.4], None),
    ];
    let mut worst: f64 = 0.0;
    let mut exact_ok = true;
    for (inst, p, expected) in cases {
        let brute = inst.wardrop_bruteforce(&p, 1000).unwrap();
        if let Some(e) = expected {
            exact_ok &= brute == e;
        }
        let sys = inst.followers(inst.default_step()).unwrap();
        let run = run_inner(&sys, &p, &inst.uniform_flows(), 500, false).unwrap();
        worst = worst.max(distance(&run.y_final, &brute));
    }
    verdict(
        worst <= 1e-3 && exact_ok,
        format!("max |run_inner - bruteforce| = {worst:.2e} (limit 1e-3); brute-force examples exact: {exact_ok}"),
    )
}

/// Grid search over tolls in `[-1, 1]²` at step 1e-2, refined at step 1e-3,
/// with brute-force equilibria.
fn toll_grid_optimum(inst: &RoutingInstance) -> f64 {
    let value = |p: [f64; 2]| {
        let q = inst.wardrop_bruteforce(&p, 1000).unwrap();
        inst.leader_routing_objective(&p, &q).unwrap()
    };
    let search = |center: [f64; 2], step: f64, half: i32| {
        let grid: Vec<[f64; 2]> = (-half..=half)
            .flat_map(|i| (-half..=half).map(move |j| [center[0] + i as f64 * step, center[1] + j as f64 * step]))
            .collect();
        grid.into_par_iter()
            .map(|p| (value(p), p))
            .reduce(|| (f64::INFINITY, [0.0, 0.0]), |a, b| if b.0 < a.0 { b } else { a })
    };
    let coarse = search([0.0, 0.0], 1e-2, 100);
    search(coarse.1, 1e-3, 20).0
}

fn c8_incentive_design() -> Verdict {
    let inst = two_link(0.1);
    let optimum = toll_grid_optimum(&inst);
    let baseline = inst.hyper_objective(&[0.0, 0.0]).unwrap();
    let followers = inst.followers(inst.default_step()).unwrap();
    let mut finals = Vec::new();
    for seed in 0..5 {
        let cfg = config(512, InnerBudget::Auto, 0.2, 2, seed, vec![0.0, 0.0], inst.uniform_flows());
        let trace = run_algorithm(&inst, &followers, &cfg).unwrap();
        finals.push(inst.hyper_objective(&trace.final_x).unwrap());
    }
    let ok = finals.iter().all(|&f| f < baseline && f <= 1.05 * optimum);
    let shown: Vec<String> = finals.iter().map(|f| format!("{f:.4}")).collect();
    verdict(
        ok,
        format!("final objectives [{}] vs baseline {baseline:.4}, grid optimum {optimum:.4} (+5%)", shown.join(", ")),
    )
}

fn saddle_run(problem: &StrictSaddleProblem, rounds: usize, seed: u64) -> RunTrace {
    let followers = problem.followers(gamma_for(0.5)).unwrap();
    let cfg = config(rounds, InnerBudget::Auto, 0.5, 2, seed, vec![0.0, 0.0], vec![0.0]);
    run_algorithm(problem, &followers, &cfg).unwrap()
}

fn c9_escape() -> Verdict {
    let problem = StrictSaddleProblem::new(vec![1.0, -1.0], 0.0).unwrap();
    let escaped: usize = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let trace = saddle_run(&problem, 2048, seed);
            (1536..=2048).all(|t| norm_sq(trace.iterate(t).unwrap()) > 0.01) as usize
        })
        .sum();
    verdict(escaped >= 95, format!("{escaped} of 100 runs stay outside the 0.01-ball in the final quarter (need 95)"))
}

fn c10_pseudotrajectory() -> Verdict {
    let problem = StrictSaddleProblem::new(vec![1.0, -1.0], 1.0).unwrap();
    let sups: Vec<(f64, f64)> = (0..30u64)
        .into_par_iter()
        .map(|seed| {
            let trace = saddle_run(&problem, 1024, seed);
            let early = shadow_trajectory(&problem, &trace, 32, 16).unwrap().sup_gap();
            let late = shadow_trajectory(&problem, &trace, 512, 16).unwrap().sup_gap();
            (early, late)
        })
        .collect();
    let early = sups.iter().map(|s| s.0).sum::<f64>() / 30.0;
    let late = sups.iter().map(|s| s.1).sum::<f64>() / 30.0;
    verdict(late < early, format!("mean sup gap at t=32: {early:.4}, at t=512: {late:.4}"))
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Verdict {
    let text = r#"{"problem": {"kind": "quadratic", "d": 3},
                   "solver": {"T": 200, "x0": [1.0, -1.0, 0.5]},
                   "replicates": 4, "sweep": {"K": [2, "auto"]}}"#;
    let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, Mode::Sweep, a.path(), Some(1)).unwrap();
    run_experiment(&cfg, Mode::Sweep, b.path(), Some(4)).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let traces = ta.iter().filter(|(p, _)| p.ends_with(".csv") && p.contains("seed_")).count();
    verdict(
        ta == tb && traces == 8,
        format!("{} files compared byte for byte across two invocations ({traces} traces)", ta.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("1 smoothed-gradient identity", c1_smoothed_gradient),
        ("2 estimator error bounds", c2_error_bounds),
        ("3 stationarity rate", c3_rate),
        ("4 inner-accuracy floor", c4_alpha_floor),
        ("5 inner-iteration budget", c5_inner_budget),
        ("6 iterate sensitivity", c6_sensitivity),
        ("7 Wardrop oracle equivalence", c7_wardrop),
        ("8 end-to-end toll design", c8_incentive_design),
        ("9 saddle escape", c9_escape),
        ("10 pseudotrajectory trend", c10_pseudotrajectory),
        ("11 determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let v = check();
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("[{status}] criterion {name}: {} ({:.1}s)", v.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
