//! Problem contracts shared by the solver, the benchmarks and the diagnostics.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::check_finite;

/// The leader's strategy `x ∈ ℝᵈ`. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaderStrategy(Vec<f64>);

impl LeaderStrategy {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite("leader strategy", &coords)?;
        Ok(Self(coords))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LeaderStrategy {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// The followers' joint profile `y ∈ Y ⊂ ℝ^{d′}`.
///
/// Several followers are represented by concatenating their strategies; the
/// feasible set is then a product set and the follower system's projection acts
/// blockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FollowerProfile(Vec<f64>);

impl FollowerProfile {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite("follower profile", &coords)?;
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FollowerProfile {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Lipschitz and smoothness constants of the leader side, all optional.
///
/// `l_fx`, `l_fy`: Lipschitz constants of `f` in `x` and `y`; `ell_fy`: smoothness of
/// `f` in `y`; `l_s`: Lipschitz constant of the solution map; `l_ftilde`, `ell_ftilde`:
/// Lipschitz and smoothness constants of the hyper-objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub l_fx: Option<f64>,
    pub l_fy: Option<f64>,
    pub ell_fy: Option<f64>,
    pub l_s: Option<f64>,
    pub l_ftilde: Option<f64>,
    pub ell_ftilde: Option<f64>,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("l_fx", self.l_fx),
            ("l_fy", self.l_fy),
            ("ell_fy", self.ell_fy),
            ("l_s", self.l_s),
            ("l_ftilde", self.l_ftilde),
            ("ell_ftilde", self.ell_ftilde),
        ];
        for (name, value) in named {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!(
                        "constant {name} must be finite and nonnegative, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evaluation contract for the leader.
///
/// `evaluate` must be deterministic: identical inputs give bitwise identical
/// outputs. The analytic hooks are optional and only used by benchmarks and
/// diagnostics; the solver itself only calls `evaluate`.
pub trait LeaderProblem: Send + Sync {
    fn leader_dim(&self) -> usize;

    fn follower_dim(&self) -> usize;

    /// The leader objective `f(x, y)`.
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64;

    fn constants(&self) -> ProblemConstants {
        ProblemConstants::default()
    }

    /// Closed-form equilibrium response `S(x)`, when known.
    fn solution_map(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Closed-form `∇f̃(x)`. `Some(Err(_))` when the problem has a closed form in
    /// general but not at this point (e.g. on a clamp boundary).
    fn hypergradient(&self, _x: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }

    /// `f̃(x) = f(x, S(x))` through the analytic solution map.
    fn hyper_objective(&self, x: &[f64]) -> Option<f64> {
        self.solution_map(x).map(|y| self.evaluate(x, &y))
    }
}

impl<P: LeaderProblem + ?Sized> LeaderProblem for &P {
    fn leader_dim(&self) -> usize {
        (**self).leader_dim()
    }
    fn follower_dim(&self) -> usize {
        (**self).follower_dim()
    }
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        (**self).evaluate(x, y)
    }
    fn constants(&self) -> ProblemConstants {
        (**self).constants()
    }
    fn solution_map(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).solution_map(x)
    }
    fn hypergradient(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        (**self).hypergradient(x)
    }
    fn hyper_objective(&self, x: &[f64]) -> Option<f64> {
        (**self).hyper_objective(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_reject_non_finite() {
        assert!(LeaderStrategy::new(vec![1.0, f64::NAN]).is_err());
        assert!(FollowerProfile::new(vec![f64::INFINITY]).is_err());
        let x = LeaderStrategy::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(x.dim(), 2);
        assert_eq!(&x[..], &[1.0, 2.0]);
    }

    #[test]
    fn constants_must_be_nonnegative() {
        let mut c = ProblemConstants::default();
        assert!(c.validate().is_ok());
        c.ell_ftilde = Some(-1.0);
        assert!(c.validate().is_err());
        c.ell_ftilde = Some(f64::NAN);
        assert!(c.validate().is_err());
        c.ell_ftilde = Some(2.0);
        assert!(c.validate().is_ok());
    }
}
