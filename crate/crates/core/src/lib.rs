//! Follower-agnostic optimization for Stackelberg games.
//!
//! A leader minimizes the hyper-objective `f̃(x) = f(x, S(x))` where `S(x)` is the
//! equilibrium response of the followers. The leader never sees the followers'
//! utilities or strategy sets: each round it announces two strategies, `x` and a
//! randomly perturbed `x + δv`, lets the followers adapt for `K` steps of their own
//! update rule, evaluates its own loss at the resulting profiles and takes a
//! two-point zeroth-order gradient step.
//!
//! The crate is organized as
//!
//! - [`model`] and [`schedule`]: problem contracts, step-size and perturbation
//!   schedules, rate certificates and inner-iteration budgets.
//! - [`estimator`]: unit-sphere sampling and the two-point estimators.
//! - [`lower_level`]: feasible-set projections and the projected-gradient follower rule.
//! - [`solver`]: the outer loop with warm-started inner runs and trace recording.
//! - [`problems`]: analytic benchmark instances (quadratic bilevel, strict saddle,
//!   trigonometric bilevel, congestion-priced routing).
//! - [`diagnostics`]: finite-difference hyper-gradients, error decomposition,
//!   shadow trajectories, Hessian probes and rate fitting.

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod lower_level;
pub mod model;
pub mod problems;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};
pub use estimator::RngStream;
pub use lower_level::{FeasibleSet, FollowerConstants, FollowerSystem, InnerRunResult};
pub use model::{FollowerProfile, LeaderProblem, LeaderStrategy, ProblemConstants};
pub use schedule::{RateCertificate, ScheduleParams};
pub use solver::{run_algorithm, InnerBudget, RoundRecord, RunTrace, SolverConfig};

/// Feasibility tolerance used for follower profiles after projection.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Library version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
