//! The leader's outer loop.
//!
//! Each round samples a direction `v_t`, probes the followers at `x_t` and at
//! `x̂_t = x_t + δ_t v_t` with `K` inner updates each (both warm-started from the
//! previous round's response at `x_t`), forms the two-point estimate from the
//! two observed leader losses and takes the step `x_{t+1} = x_t − η_t F̂`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{two_point_estimator, RngStream};
use crate::linalg::{axpy, check_len, norm_sq};
use crate::lower_level::{run_inner, FollowerSystem};
use crate::model::{FollowerProfile, LeaderProblem, LeaderStrategy};
use crate::schedule::ScheduleParams;

/// Number of follower updates per probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerBudget {
    Fixed(usize),
    /// Chosen from the followers' rate certificate, the horizon and `d`.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Number of outer rounds `T`.
    pub rounds: usize,
    pub inner: InnerBudget,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub x0: LeaderStrategy,
    /// Shared initial follower profile for both probes of round 0.
    pub y0: FollowerProfile,
    /// Keep every inner iterate of every round (memory heavy).
    pub record_inner: bool,
}

/// Everything observed and computed in one outer round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub x: LeaderStrategy,
    pub v: Vec<f64>,
    pub delta: f64,
    pub eta: f64,
    pub x_hat: LeaderStrategy,
    /// Followers' response after `K` updates at `x̂_t`.
    pub y_hat_k: FollowerProfile,
    /// Followers' response after `K` updates at `x_t`.
    pub y_base_k: FollowerProfile,
    pub f_hat: f64,
    pub f_base: f64,
    /// `F̂(x_t; δ_t, v_t)`
    pub estimate: Vec<f64>,
    /// `‖∇f̃(x_t)‖²` when the problem has a closed-form hyper-gradient at `x_t`.
    pub grad_norm_sq: Option<f64>,
}

/// Inner iterates of one round, kept when `record_inner` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerIterates {
    pub at_x_hat: Vec<FollowerProfile>,
    pub at_x: Vec<FollowerProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub config: SolverConfig,
    /// The resolved inner budget `K`.
    pub inner_iterations: usize,
    pub rounds: Vec<RoundRecord>,
    /// `x_T`, the iterate after the last round.
    pub final_x: LeaderStrategy,
    pub warnings: Vec<String>,
    pub inner_iterates: Option<Vec<InnerIterates>>,
}

impl RunTrace {
    /// `x_t` for `t ∈ [0, T]`.
    pub fn iterate(&self, t: usize) -> Option<&LeaderStrategy> {
        if t < self.rounds.len() {
            Some(&self.rounds[t].x)
        } else if t == self.rounds.len() {
            Some(&self.final_x)
        } else {
            None
        }
    }
}

/// Resolves the inner budget for a configuration.
pub fn resolve_inner_iterations<S: FollowerSystem + ?Sized>(followers: &S, cfg: &SolverConfig) -> Result<usize> {
    match cfg.inner {
        InnerBudget::Fixed(0) => Err(Error::invalid("inner budget K must be positive")),
        InnerBudget::Fixed(k) => Ok(k),
        InnerBudget::Auto => followers
            .rate()
            .choose_inner_iterations(cfg.rounds, cfg.schedule.d),
    }
}

fn validate<P, S>(problem: &P, followers: &S, cfg: &SolverConfig) -> Result<Vec<String>>
where
    P: LeaderProblem + ?Sized,
    S: FollowerSystem + ?Sized,
{
    if cfg.rounds == 0 {
        return Err(Error::invalid("horizon T must be positive"));
    }
    cfg.schedule.validate()?;
    let d = problem.leader_dim();
    check_len("x0", d, &cfg.x0)?;
    if cfg.schedule.d != d {
        return Err(Error::DimensionMismatch {
            what: "schedule dimension",
            expected: d,
            got: cfg.schedule.d,
        });
    }
    if followers.follower_dim() != problem.follower_dim() {
        return Err(Error::DimensionMismatch {
            what: "follower system dimension",
            expected: problem.follower_dim(),
            got: followers.follower_dim(),
        });
    }
    check_len("y0", problem.follower_dim(), &cfg.y0)?;
    if !followers.is_feasible(&cfg.y0) {
        return Err(Error::invalid("y0 is not in the followers' feasible set"));
    }
    let constants = problem.constants();
    constants.validate()?;
    Ok(cfg
        .schedule
        .check_step_bound(constants.ell_ftilde)?
        .into_iter()
        .collect())
}

/// Runs the follower-agnostic outer loop for `cfg.rounds` rounds.
///
/// Deterministic in `(problem, followers, cfg)`: the direction stream is
/// `RngStream::new(cfg.seed, 0)`. A non-finite leader iterate or loss aborts the
/// run with [`Error::Aborted`] naming the round.
pub fn run_algorithm<P, S>(problem: &P, followers: &S, cfg: &SolverConfig) -> Result<RunTrace>
where
    P: LeaderProblem + ?Sized,
    S: FollowerSystem + ?Sized,
{
    let warnings = validate(problem, followers, cfg)?;
    let k = resolve_inner_iterations(followers, cfg)?;
    let d = problem.leader_dim();
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut x = cfg.x0.clone().into_inner();
    let mut warm = cfg.y0.clone().into_inner();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut inner_iterates = cfg.record_inner.then(Vec::new);

    for t in 0..cfg.rounds {
        let abort = |reason: String| Error::Aborted { round: t, reason };
        let v = rng.sample_unit_sphere(d)?;
        let delta = cfg.schedule.delta(t);
        let eta = cfg.schedule.eta(t);
        let x_hat = axpy(&x, delta, &v);

        let probe = run_inner(followers, &x_hat, &warm, k, cfg.record_inner)
            .map_err(|e| abort(format!("inner run at x_hat: {e}")))?;
        let base = run_inner(followers, &x, &warm, k, cfg.record_inner)
            .map_err(|e| abort(format!("inner run at x: {e}")))?;

        let f_hat = problem.evaluate(&x_hat, &probe.y_final);
        let f_base = problem.evaluate(&x, &base.y_final);
        let estimate = two_point_estimator(d, delta, &v, f_hat, f_base).map_err(|e| abort(e.to_string()))?;
        let grad_norm_sq = match problem.hypergradient(&x) {
            Some(Ok(g)) => Some(norm_sq(&g)),
            _ => None,
        };

        let next = axpy(&x, -eta, &estimate);
        if !next.iter().all(|c| c.is_finite()) {
            return Err(abort("leader iterate became non-finite".into()));
        }

        if let Some(store) = inner_iterates.as_mut() {
            store.push(InnerIterates {
                at_x_hat: probe.iterates.unwrap_or_default(),
                at_x: base.iterates.unwrap_or_default(),
            });
        }
        warm = base.y_final.as_slice().to_vec();
        rounds.push(RoundRecord {
            t,
            x: LeaderStrategy::new(x)?,
            v,
            delta,
            eta,
            x_hat: LeaderStrategy::new(x_hat).map_err(|e| abort(e.to_string()))?,
            y_hat_k: probe.y_final,
            y_base_k: base.y_final,
            f_hat,
            f_base,
            estimate,
            grad_norm_sq,
        });
        x = next;
    }

    Ok(RunTrace {
        config: cfg.clone(),
        inner_iterations: k,
        rounds,
        final_x: LeaderStrategy::new(x)?,
        warnings,
        inner_iterates,
    })
}

/// `(argmin_t, min_t ‖∇f̃(x_t)‖²)` over the recorded rounds, using the
/// problem's closed-form hyper-gradient.
pub fn min_grad_stationarity<P: LeaderProblem + ?Sized>(trace: &RunTrace, problem: &P) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for r in &trace.rounds {
        let value = match r.grad_norm_sq {
            Some(v) => v,
            None => match problem.hypergradient(&r.x) {
                Some(g) => norm_sq(&g?),
                None => return Err(Error::MissingAnalytic("hypergradient")),
            },
        };
        if best.is_none_or(|(_, b)| value < b) {
            best = Some((r.t, value));
        }
    }
    best.ok_or_else(|| Error::invalid("trace has no rounds"))
}
