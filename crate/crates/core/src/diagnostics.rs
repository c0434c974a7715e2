//! Instruments for checking the algorithm's behaviour against analytic structure:
//! finite-difference hyper-gradients, the three-way error decomposition of the
//! practical estimator, shadow gradient-descent trajectories, Hessian eigenvalue
//! probes and log-log rate fits.

use crate::error::{Error, Result};
use crate::estimator::{oracle_estimator, smoothed_gradient_mc, RngStream};
use crate::linalg::{axpy, check_len, distance, norm, norm_sq, sub};
use crate::lower_level::{least_squares_slope, run_inner, FollowerSystem};
use crate::model::LeaderProblem;
use crate::solver::RunTrace;

/// Inner residual a reference run must reach before its response is trusted.
pub const REFERENCE_RESIDUAL: f64 = 1e-8;

/// Minimum number of fresh directions for the conditional-mean term.
pub const MIN_MC_SAMPLES: usize = 10_000;

fn converged_response<P, S>(problem: &P, followers: &S, x: &[f64], y0: &[f64], k_ref: usize) -> Result<f64>
where
    P: LeaderProblem + ?Sized,
    S: FollowerSystem + ?Sized,
{
    let run = run_inner(followers, x, y0, k_ref, false)?;
    if run.residual >= REFERENCE_RESIDUAL {
        return Err(Error::NotConverged(format!(
            "inner residual {:.3e} after {k_ref} steps",
            run.residual
        )));
    }
    Ok(problem.evaluate(x, &run.y_final))
}

/// Central differences of `x ↦ f(x, y⁽ᴷʳᵉᶠ⁾(x))`.
///
/// A base run from the projection of the origin establishes a converged
/// response at `x`; every probe `x ± h eᵢ` then warm-starts from it.
pub fn fd_hypergradient<P, S>(problem: &P, followers: &S, x: &[f64], h: f64, k_ref: usize) -> Result<Vec<f64>>
where
    P: LeaderProblem + ?Sized,
    S: FollowerSystem + ?Sized,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if k_ref == 0 {
        return Err(Error::invalid("K_ref must be positive"));
    }
    check_len("leader strategy", problem.leader_dim(), x)?;
    let start = followers.project(&vec![0.0; followers.follower_dim()])?;
    let base = run_inner(followers, x, &start, k_ref, false)?;
    if base.residual >= REFERENCE_RESIDUAL {
        return Err(Error::NotConverged(format!(
            "base inner residual {:.3e} after {k_ref} steps",
            base.residual
        )));
    }
    let y_base = base.y_final.into_inner();
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = converged_response(problem, followers, &probe, &y_base, k_ref)?;
        probe[i] = x[i] - h;
        let down = converged_response(problem, followers, &probe, &y_base, k_ref)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `(argmin_t, min_t ‖∇f̃(x_t)‖²)` with the hyper-gradient from [`fd_hypergradient`].
pub fn min_grad_stationarity_fd<P, S>(
    trace: &RunTrace,
    problem: &P,
    followers: &S,
    h: f64,
    k_ref: usize,
) -> Result<(usize, f64)>
where
    P: LeaderProblem + ?Sized,
    S: FollowerSystem + ?Sized,
{
    let mut best: Option<(usize, f64)> = None;
    for r in &trace.rounds {
        let value = norm_sq(&fd_hypergradient(problem, followers, &r.x, h, k_ref)?);
        if best.is_none_or(|(_, b)| value < b) {
            best = Some((r.t, value));
        }
    }
    best.ok_or_else(|| Error::invalid("trace has no rounds"))
}

/// Error terms of one round:
/// `F̂ = ∇f̃(x_t) + e1 + e2 + e3` with
///
/// - `e1 = E_v[F̂_orig | x_t] − ∇f̃(x_t)`, the smoothing bias,
/// - `e2 = F̂_orig − E_v[F̂_orig | x_t]`, the direction noise,
/// - `e3 = F̂ − F̂_orig`, the inner-loop error,
///
/// where `F̂_orig` is the oracle estimator built from `f̃` itself with the same
/// `v_t` and `δ_t`. The conditional mean is a Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundErrors {
    pub t: usize,
    pub hypergradient: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub e3: Vec<f64>,
    /// Per-coordinate standard errors of the conditional-mean estimate.
    pub mc_std_err: Vec<f64>,
}

impl RoundErrors {
    /// `Σᵢ SEᵢ²`, the Monte Carlo variance carried into `‖e1‖²`.
    pub fn mc_variance(&self) -> f64 {
        norm_sq(&self.mc_std_err)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub rounds: Vec<RoundErrors>,
}

impl ErrorDecomposition {
    fn mean_of(&self, f: impl Fn(&RoundErrors) -> f64) -> f64 {
        self.rounds.iter().map(f).sum::<f64>() / self.rounds.len() as f64
    }

    pub fn mean_e1_sq(&self) -> f64 {
        self.mean_of(|r| norm_sq(&r.e1))
    }

    pub fn mean_e2_sq(&self) -> f64 {
        self.mean_of(|r| norm_sq(&r.e2))
    }

    pub fn mean_e3_sq(&self) -> f64 {
        self.mean_of(|r| norm_sq(&r.e3))
    }

    pub fn mean_mc_variance(&self) -> f64 {
        self.mean_of(RoundErrors::mc_variance)
    }
}

/// Decomposes the practical estimator of every round of `trace`.
///
/// Needs the problem's analytic solution map (for `f̃`) and hyper-gradient.
/// `n_mc` fresh directions per round estimate the conditional mean; at least
/// [`MIN_MC_SAMPLES`] are required.
pub fn error_decomposition<P: LeaderProblem + ?Sized>(
    problem: &P,
    trace: &RunTrace,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<ErrorDecomposition> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::invalid(format!(
            "n_mc must be at least {MIN_MC_SAMPLES}, got {n_mc}"
        )));
    }
    if trace.rounds.is_empty() {
        return Err(Error::invalid("trace has no rounds"));
    }
    let d = problem.leader_dim();
    let ftilde = |x: &[f64]| problem.hyper_objective(x).unwrap_or(f64::NAN);
    let mut rounds = Vec::with_capacity(trace.rounds.len());
    for r in &trace.rounds {
        let grad = problem
            .hypergradient(&r.x)
            .ok_or(Error::MissingAnalytic("hypergradient"))??;
        let f_x = problem
            .hyper_objective(&r.x)
            .ok_or(Error::MissingAnalytic("solution map"))?;
        let f_x_hat = problem
            .hyper_objective(&r.x_hat)
            .ok_or(Error::MissingAnalytic("solution map"))?;
        let orig = oracle_estimator(d, r.delta, &r.v, f_x_hat, f_x)?;
        let mc = smoothed_gradient_mc(ftilde, &r.x, r.delta, n_mc, rng)?;
        rounds.push(RoundErrors {
            t: r.t,
            e1: sub(&mc.mean, &grad),
            e2: sub(&orig, &mc.mean),
            e3: sub(&r.estimate, &orig),
            hypergradient: grad,
            mc_std_err: mc.std_err,
        });
    }
    Ok(ErrorDecomposition { rounds })
}

/// Exact gradient descent `z_{s+1} = z_s − η_{t+s} ∇f̃(z_s)` seeded at `z_0 = x̂_t`,
/// compared against the algorithm's iterates `x_{t+s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTrajectory {
    pub anchor: usize,
    pub horizon: usize,
    pub z: Vec<Vec<f64>>,
    /// `g_s = ‖x_{t+s} − z_s‖` for `s = 0..=S`.
    pub gaps: Vec<f64>,
}

impl ShadowTrajectory {
    pub fn sup_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(0.0, f64::max)
    }
}

pub fn shadow_trajectory<P: LeaderProblem + ?Sized>(
    problem: &P,
    trace: &RunTrace,
    t: usize,
    horizon: usize,
) -> Result<ShadowTrajectory> {
    let total = trace.rounds.len();
    if t >= total || t + horizon > total {
        return Err(Error::invalid(format!(
            "shadow window [{t}, {}] exceeds the trace horizon {total}",
            t + horizon
        )));
    }
    let schedule = &trace.config.schedule;
    let mut z = vec![trace.rounds[t].x_hat.as_slice().to_vec()];
    for s in 0..horizon {
        let current = &z[s];
        let grad = problem
            .hypergradient(current)
            .ok_or(Error::MissingAnalytic("hypergradient"))??;
        z.push(axpy(current, -schedule.eta(t + s), &grad));
    }
    let gaps = z
        .iter()
        .enumerate()
        .map(|(s, zs)| distance(trace.iterate(t + s).expect("window checked"), zs))
        .collect();
    Ok(ShadowTrajectory {
        anchor: t,
        horizon,
        z,
        gaps,
    })
}

/// `g_s = ‖x_{t+s} − z_s(x̂_t)‖` for `s = 0..=S`.
pub fn shadow_trajectory_gap<P: LeaderProblem + ?Sized>(
    problem: &P,
    trace: &RunTrace,
    t: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    Ok(shadow_trajectory(problem, trace, t, horizon)?.gaps)
}

/// Smallest eigenvalue of `∇²f̃(x)` from finite-difference Hessian-vector
/// products `(∇f̃(x + hv) − ∇f̃(x − hv)) / 2h`, `h = probe_h·(1 + ‖x‖)`.
///
/// Power iteration runs on `sI − H`, where the shift `s` exceeds the Frobenius
/// norm of the Hessian estimated from `d` coordinate probes. Converges when the
/// Rayleigh quotient moves by less than `1e-10·max(1, s)`.
pub fn min_hessian_eigenvalue<G>(ftilde_grad: G, x: &[f64], probe_h: f64, iters: usize) -> Result<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(probe_h.is_finite() && probe_h > 0.0) {
        return Err(Error::invalid(format!("probe_h must be positive, got {probe_h}")));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty point"));
    }
    let d = x.len();
    let h = probe_h * (1.0 + norm(x));
    let hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let up = ftilde_grad(&axpy(x, h, v));
        let down = ftilde_grad(&axpy(x, -h, v));
        check_len("gradient", d, &up)?;
        check_len("gradient", d, &down)?;
        let out: Vec<f64> = up.iter().zip(&down).map(|(u, w)| (u - w) / (2.0 * h)).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("Hessian-vector product"))
        }
    };

    let mut frob_sq = 0.0;
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        frob_sq += norm_sq(&hvp(&e)?);
    }
    let shift = frob_sq.sqrt() + 1.0;
    let tol = 1e-10 * shift.max(1.0);

    let mut rng = RngStream::new(0x6865_7373, 0);
    let mut v = rng.sample_unit_sphere(d)?;
    let mut previous = f64::NAN;
    for _ in 0..iters {
        let hv = hvp(&v)?;
        let mv: Vec<f64> = v.iter().zip(&hv).map(|(vi, hi)| shift * vi - hi).collect();
        let rayleigh: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let len = norm(&mv);
        if len == 0.0 {
            return Ok(shift - rayleigh);
        }
        v = mv.iter().map(|c| c / len).collect();
        if (rayleigh - previous).abs() <= tol {
            return Ok(shift - rayleigh);
        }
        previous = rayleigh;
    }
    Err(Error::NotConverged(format!(
        "power iteration did not converge in {iters} iterations"
    )))
}

/// Least-squares slope of `ln y` against `ln T`.
pub fn loglog_slope(values: &[(f64, f64)]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::invalid(format!(
            "rate fit needs at least 3 points, got {}",
            values.len()
        )));
    }
    let mut points = Vec::with_capacity(values.len());
    for &(t, y) in values {
        if !(t > 0.0 && y > 0.0 && t.is_finite() && y.is_finite()) {
            return Err(Error::invalid(format!("rate fit needs positive values, got ({t}, {y})")));
        }
        points.push((t.ln(), y.ln()));
    }
    Ok(least_squares_slope(&points))
}
