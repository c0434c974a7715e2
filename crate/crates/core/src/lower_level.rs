//! Follower-side machinery: feasible-set projections, the projected-gradient
//! update rule, inner-loop execution and empirical checks of the followers'
//! stability and convergence-rate assumptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, check_len, distance};
use crate::model::FollowerProfile;
use crate::schedule::RateCertificate;
use crate::FEASIBILITY_TOL;

/// Componentwise clamp of `y` into `[lo, hi]`.
pub fn project_box(y: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
    check_len("box lower bound", y.len(), lo)?;
    check_len("box upper bound", y.len(), hi)?;
    y.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| {
            if l > h {
                Err(Error::invalid(format!("box bounds inverted: {l} > {h}")))
            } else {
                Ok(v.max(l).min(h))
            }
        })
        .collect()
}

/// Euclidean projection onto the scaled simplex `{q ≥ 0, Σq = mass}`.
///
/// Sort-based: with `u` sorted descending, the support size is the largest `j`
/// with `u_j > (Σ_{i≤j} u_i − mass)/j` and the shift `θ` is that ratio. Ties in
/// the sort keep index order. Inputs that are already feasible to within
/// `1e-12·max(1, mass)` are returned unchanged, which makes the map bitwise
/// idempotent.
pub fn project_simplex(y: &[f64], mass: f64) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::invalid("cannot project an empty vector onto a simplex"));
    }
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::invalid(format!("simplex mass must be positive, got {mass}")));
    }
    check_finite("simplex projection input", y)?;
    let sum: f64 = y.iter().sum();
    if y.iter().all(|&v| v >= 0.0) && (sum - mass).abs() <= 1e-12 * mass.max(1.0) {
        return Ok(y.to_vec());
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - mass) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(y.iter().map(|&v| (v - theta).max(0.0)).collect())
}

/// One simplex factor `{q[start..start+len] ≥ 0, Σ = mass}` of a product set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexBlock {
    pub start: usize,
    pub len: usize,
    pub mass: f64,
}

/// Feasible sets with cheap Euclidean projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeasibleSet {
    Unconstrained { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// A product of scaled simplices covering consecutive coordinate blocks.
    Simplices { dim: usize, blocks: Vec<SimplexBlock> },
}

impl FeasibleSet {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn uniform_box(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("box bounds inverted: {lo} > {hi}")));
        }
        Ok(FeasibleSet::Box {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        })
    }

    pub fn simplices(blocks: Vec<SimplexBlock>) -> Result<Self> {
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.len == 0 {
                return Err(Error::invalid("simplex blocks must be nonempty and contiguous"));
            }
            if !(b.mass.is_finite() && b.mass > 0.0) {
                return Err(Error::invalid(format!("simplex mass must be positive, got {}", b.mass)));
            }
            next += b.len;
        }
        Ok(FeasibleSet::Simplices { dim: next, blocks })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Unconstrained { dim } | FeasibleSet::Simplices { dim, .. } => *dim,
            FeasibleSet::Box { lo, .. } => lo.len(),
        }
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("follower profile", self.dim(), y)?;
        match self {
            FeasibleSet::Unconstrained { .. } => Ok(y.to_vec()),
            FeasibleSet::Box { lo, hi } => project_box(y, lo, hi),
            FeasibleSet::Simplices { blocks, .. } => {
                let mut out = Vec::with_capacity(y.len());
                for b in blocks {
                    out.extend(project_simplex(&y[b.start..b.start + b.len], b.mass)?);
                }
                Ok(out)
            }
        }
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        if y.len() != self.dim() || !y.iter().all(|v| v.is_finite()) {
            return false;
        }
        match self {
            FeasibleSet::Unconstrained { .. } => true,
            FeasibleSet::Box { lo, hi } => y
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol),
            FeasibleSet::Simplices { blocks, .. } => blocks.iter().all(|b| {
                let part = &y[b.start..b.start + b.len];
                part.iter().all(|&v| v >= -tol) && (part.iter().sum::<f64>() - b.mass).abs() <= tol
            }),
        }
    }
}

/// Lipschitz constants of `∇_y g` in `x` (`l_gx`) and in `y` (`ell_gy`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FollowerConstants {
    pub l_gx: Option<f64>,
    pub ell_gy: Option<f64>,
}

/// The followers' side of the game, realized through a lower-level potential
/// `g(x, ·)` with `G(x, ·) = ∇_y g(x, ·)`.
///
/// The default update rule `respond` is one projected-gradient step
/// `P_Y(y − γ ∇_y g(x, y))` with a fixed step size `γ`.
pub trait FollowerSystem: Send + Sync {
    fn follower_dim(&self) -> usize;

    fn feasible_set(&self) -> &FeasibleSet;

    /// `∇_y g(x, y)`.
    fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// `g(x, y)`, when the potential is evaluable.
    fn potential(&self, _x: &[f64], _y: &[f64]) -> Option<f64> {
        None
    }

    fn step_size(&self) -> f64;

    fn rate(&self) -> RateCertificate;

    fn constants(&self) -> FollowerConstants {
        FollowerConstants::default()
    }

    fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.feasible_set().project(y)
    }

    fn is_feasible(&self, y: &[f64]) -> bool {
        self.feasible_set().contains(y, FEASIBILITY_TOL)
    }

    /// One application of the update rule `H(y; x)`.
    fn respond(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        projected_gradient_step(self, x, y)
    }
}

impl<S: FollowerSystem + ?Sized> FollowerSystem for &S {
    fn follower_dim(&self) -> usize {
        (**self).follower_dim()
    }
    fn feasible_set(&self) -> &FeasibleSet {
        (**self).feasible_set()
    }
    fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (**self).potential_gradient(x, y)
    }
    fn potential(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        (**self).potential(x, y)
    }
    fn step_size(&self) -> f64 {
        (**self).step_size()
    }
    fn rate(&self) -> RateCertificate {
        (**self).rate()
    }
    fn constants(&self) -> FollowerConstants {
        (**self).constants()
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        (**self).project(y)
    }
    fn is_feasible(&self, y: &[f64]) -> bool {
        (**self).is_feasible(y)
    }
    fn respond(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        (**self).respond(x, y)
    }
}

/// `P_Y(y − γ ∇_y g(x, y))`
pub fn projected_gradient_step<S: FollowerSystem + ?Sized>(sys: &S, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let grad = sys.potential_gradient(x, y);
    check_len("potential gradient", y.len(), &grad)?;
    check_finite("potential gradient", &grad)?;
    let gamma = sys.step_size();
    let moved: Vec<f64> = y.iter().zip(&grad).map(|(yi, gi)| yi - gamma * gi).collect();
    sys.project(&moved)
}

/// Outcome of `K` follower updates.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerRunResult {
    /// `y⁽ᴷ⁾`
    pub y_final: FollowerProfile,
    /// `y⁽⁰⁾ … y⁽ᴷ⁾` when requested.
    pub iterates: Option<Vec<FollowerProfile>>,
    /// `‖y⁽ᴷ⁾ − y⁽ᴷ⁻¹⁾‖`, zero when `K = 0`.
    pub residual: f64,
}

/// Applies the follower update `k` times from `y0` at leader strategy `x`.
pub fn run_inner<S: FollowerSystem + ?Sized>(
    sys: &S,
    x: &[f64],
    y0: &[f64],
    k: usize,
    keep_iterates: bool,
) -> Result<InnerRunResult> {
    check_len("initial follower profile", sys.follower_dim(), y0)?;
    let mut y = y0.to_vec();
    let mut iterates = keep_iterates.then(|| FollowerProfile::new(y.clone()).map(|p| vec![p])).transpose()?;
    let mut residual = 0.0;
    for _ in 0..k {
        let next = sys.respond(x, &y)?;
        residual = distance(&next, &y);
        y = next;
        if let Some(its) = iterates.as_mut() {
            its.push(FollowerProfile::new(y.clone())?);
        }
    }
    Ok(InnerRunResult {
        y_final: FollowerProfile::new(y)?,
        iterates,
        residual,
    })
}

/// Empirical contraction rate of the follower rule at a fixed `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionFit {
    /// Fitted per-step factor `q̂` of the distance `‖y⁽ᵏ⁾ − S(x)‖`.
    pub norm_factor: f64,
    /// Exponential certificate with `C = 1` and `ρ = q̂²` (squared-distance rate).
    pub certificate: RateCertificate,
    /// The reference equilibrium used for the fit.
    pub reference: Vec<f64>,
    /// Number of iterates that entered the regression.
    pub points: usize,
}

/// Fits `q̂` by least squares on `ln ‖y⁽ᵏ⁾ − y_ref‖` over `k = 0..=K`, where
/// `y_ref` comes from a 10×-longer run from the same start that must reach a
/// residual of at most `1e-8`.
pub fn estimate_contraction_rate<S: FollowerSystem + ?Sized>(
    sys: &S,
    x: &[f64],
    y0: &[f64],
    k: usize,
) -> Result<ContractionFit> {
    if k == 0 {
        return Err(Error::invalid("contraction fit needs K ≥ 1"));
    }
    let reference = run_inner(sys, x, y0, 10 * k, false)?;
    if reference.residual > 1e-8 {
        return Err(Error::NotConverged(format!(
            "reference run of {} steps ended with residual {:.3e} > 1e-8",
            10 * k,
            reference.residual
        )));
    }
    let reference = reference.y_final.into_inner();
    let run = run_inner(sys, x, y0, k, true)?;
    let errors: Vec<f64> = run
        .iterates
        .expect("iterates requested")
        .iter()
        .map(|y| distance(y, &reference))
        .collect();
    let floor = 1e-13 * (1.0 + errors[0]);
    let points: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .take_while(|(_, &e)| e > floor)
        .map(|(i, &e)| (i as f64, e.ln()))
        .collect();
    if points.len() < 2 {
        return Err(Error::NotConverged(
            "no contraction observed: fewer than two iterates with measurable distance to equilibrium"
                .into(),
        ));
    }
    let slope = least_squares_slope(&points);
    let q = slope.exp();
    if !(q > 0.0 && q < 1.0) || errors[points.len() - 1] >= errors[0] {
        return Err(Error::NotConverged(format!(
            "no contraction observed: fitted factor {q:.6}"
        )));
    }
    Ok(ContractionFit {
        norm_factor: q,
        certificate: RateCertificate::exponential(1.0, q * q)?,
        reference,
        points: points.len(),
    })
}

pub(crate) fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Measured iterate sensitivity next to its Gronwall-type bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityCheck {
    /// `‖y⁽ᴷ⁾(x̂) − y⁽ᴷ⁾(x)‖` with both runs started from the same `y⁽⁰⁾`.
    pub measured: f64,
    /// `K · L_gx · γ · ‖x̂ − x‖ · exp(γ · ℓ_gy · K)`
    pub bound: f64,
}

impl SensitivityCheck {
    pub fn holds(&self) -> bool {
        self.measured <= self.bound
    }
}

pub fn iterate_sensitivity_check<S: FollowerSystem + ?Sized>(
    sys: &S,
    x: &[f64],
    x_hat: &[f64],
    y0: &[f64],
    k: usize,
) -> Result<SensitivityCheck> {
    let constants = sys.constants();
    let l_gx = constants.l_gx.ok_or(Error::MissingConstant("l_gx"))?;
    let ell_gy = constants.ell_gy.ok_or(Error::MissingConstant("ell_gy"))?;
    check_len("perturbed leader strategy", x.len(), x_hat)?;
    let at_x = run_inner(sys, x, y0, k, false)?;
    let at_x_hat = run_inner(sys, x_hat, y0, k, false)?;
    let gamma = sys.step_size();
    let kf = k as f64;
    Ok(SensitivityCheck {
        measured: distance(&at_x_hat.y_final, &at_x.y_final),
        bound: kf * l_gx * gamma * distance(x_hat, x) * (gamma * ell_gy * kf).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// g(x, y) = ½‖y − x‖² on a box, step size γ.
    struct Tracker {
        set: FeasibleSet,
        gamma: f64,
    }

    impl FollowerSystem for Tracker {
        fn follower_dim(&self) -> usize {
            self.set.dim()
        }
        fn feasible_set(&self) -> &FeasibleSet {
            &self.set
        }
        fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
            y.iter().zip(x).map(|(a, b)| a - b).collect()
        }
        fn potential(&self, x: &[f64], y: &[f64]) -> Option<f64> {
            Some(0.5 * distance(x, y).powi(2))
        }
        fn step_size(&self) -> f64 {
            self.gamma
        }
        fn rate(&self) -> RateCertificate {
            let q = 1.0 - self.gamma;
            RateCertificate::Exponential { c: 1.0, rho: q * q }
        }
        fn constants(&self) -> FollowerConstants {
            FollowerConstants {
                l_gx: Some(1.0),
                ell_gy: Some(1.0),
            }
        }
    }

    fn tracker(gamma: f64) -> Tracker {
        Tracker {
            set: FeasibleSet::uniform_box(2, -10.0, 10.0).unwrap(),
            gamma,
        }
    }

    #[test]
    fn box_examples() {
        let lo = [-1.0, -1.0];
        let hi = [1.0, 1.0];
        assert_eq!(project_box(&[0.2, -0.3], &lo, &hi).unwrap(), vec![0.2, -0.3]);
        assert_eq!(project_box(&[2.0, -3.0], &lo, &hi).unwrap(), vec![1.0, -1.0]);
        assert!(project_box(&[0.0], &lo, &hi).is_err());
    }

    #[test]
    fn simplex_examples() {
        let p = project_simplex(&[1.0, 0.5, 0.5], 1.0).unwrap();
        let expected = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(project_simplex(&[0.3, 0.7], 1.0).unwrap(), vec![0.3, 0.7]);
        assert_eq!(project_simplex(&[5.0, 0.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(project_simplex(&[], 1.0).is_err());
        assert!(project_simplex(&[1.0], 0.0).is_err());
    }

    /// Brute-force QP oracle: minimize ‖q − y‖² over the simplex by enumerating
    /// the active set (which coordinates are zero) and solving each
    /// equality-constrained subproblem in closed form.
    fn simplex_oracle(y: &[f64], mass: f64) -> Vec<f64> {
        let n = y.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (support.iter().map(|&i| y[i]).sum::<f64>() - mass) / support.len() as f64;
            let mut q = vec![0.0; n];
            for &i in &support {
                q[i] = y[i] - shift;
            }
            if q.iter().any(|&v| v < -1e-15) {
                continue;
            }
            let obj = distance(&q, y);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, q));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn simplex_matches_active_set_oracle() {
        let oracle = simplex_oracle(&[1.0, 0.5, 0.5], 1.0);
        let p = project_simplex(&[1.0, 0.5, 0.5], 1.0).unwrap();
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn simplex_projection_properties(
            y in prop::collection::vec(-5.0f64..5.0, 1..6),
            mass in 0.1f64..4.0,
        ) {
            let p = project_simplex(&y, mass).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - mass).abs() < 1e-10);
            // KKT: every positive coordinate is y_i − θ for one common θ.
            let shifts: Vec<f64> = p.iter().zip(&y).filter(|(q, _)| **q > 0.0).map(|(q, yi)| yi - q).collect();
            for s in &shifts {
                prop_assert!((s - shifts[0]).abs() < 1e-9);
            }
            // and zero coordinates sit below the threshold.
            for (q, yi) in p.iter().zip(&y) {
                if *q == 0.0 {
                    prop_assert!(*yi <= shifts[0] + 1e-9);
                }
            }
            let oracle = simplex_oracle(&y, mass);
            for (a, b) in p.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert_eq!(project_simplex(&p, mass).unwrap(), p);
        }

        #[test]
        fn box_projection_idempotent(y in prop::collection::vec(-5.0f64..5.0, 3)) {
            let set = FeasibleSet::uniform_box(3, -1.0, 2.0).unwrap();
            let p = set.project(&y).unwrap();
            prop_assert!(set.contains(&p, FEASIBILITY_TOL));
            prop_assert_eq!(set.project(&p).unwrap(), p);
        }

        #[test]
        fn product_simplex_projection(y in prop::collection::vec(-3.0f64..3.0, 5)) {
            let set = FeasibleSet::simplices(vec![
                SimplexBlock { start: 0, len: 2, mass: 1.5 },
                SimplexBlock { start: 2, len: 3, mass: 0.5 },
            ]).unwrap();
            let p = set.project(&y).unwrap();
            prop_assert!(set.contains(&p, FEASIBILITY_TOL));
            prop_assert_eq!(set.project(&p).unwrap(), p);
        }

        #[test]
        fn inner_steps_keep_feasibility_and_descend(
            x in prop::collection::vec(-20.0f64..20.0, 2),
            y0 in prop::collection::vec(-10.0f64..10.0, 2),
            gamma in 0.05f64..1.0,
        ) {
            let sys = tracker(gamma);
            let run = run_inner(&sys, &x, &y0, 20, true).unwrap();
            let its = run.iterates.unwrap();
            for w in its.windows(2) {
                prop_assert!(sys.is_feasible(&w[1]));
                let g0 = sys.potential(&x, &w[0]).unwrap();
                let g1 = sys.potential(&x, &w[1]).unwrap();
                prop_assert!(g1 <= g0 + 1e-12);
            }
        }
    }

    #[test]
    fn unit_step_lands_on_target() {
        let sys = tracker(1.0);
        let y = projected_gradient_step(&sys, &[0.3, -2.0], &[5.0, 5.0]).unwrap();
        assert!(distance(&y, &[0.3, -2.0]) < 1e-15);
    }

    #[test]
    fn fixed_points_and_zero_step() {
        let sys = tracker(0.5);
        assert_eq!(projected_gradient_step(&sys, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let lazy = tracker(0.0);
        assert_eq!(projected_gradient_step(&lazy, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn zero_inner_steps_return_start() {
        let sys = tracker(0.5);
        let run = run_inner(&sys, &[1.0, 1.0], &[0.25, 0.5], 0, false).unwrap();
        assert_eq!(run.y_final.as_slice(), &[0.25, 0.5]);
        assert_eq!(run.residual, 0.0);
    }

    #[test]
    fn error_halves_each_step() {
        let sys = tracker(0.5);
        let x = [1.0, -1.0];
        let run = run_inner(&sys, &x, &[3.0, 2.0], 10, true).unwrap();
        let errs: Vec<f64> = run.iterates.unwrap().iter().map(|y| distance(y, &x)).collect();
        for w in errs.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn contraction_fit_recovers_step_factor() {
        let fit = estimate_contraction_rate(&tracker(0.5), &[1.0, -1.0], &[3.0, 2.0], 20).unwrap();
        assert!((fit.norm_factor - 0.5).abs() < 0.02);
        match fit.certificate {
            RateCertificate::Exponential { c, rho } => {
                assert_eq!(c, 1.0);
                assert!((rho - 0.25).abs() < 0.02);
            }
            _ => panic!("expected exponential certificate"),
        }
    }

    #[test]
    fn contraction_fit_fails_without_motion() {
        assert!(estimate_contraction_rate(&tracker(0.0), &[1.0, -1.0], &[3.0, 2.0], 20).is_err());
    }

    #[test]
    fn sensitivity_is_zero_for_identical_strategies() {
        let sys = tracker(0.5);
        let check = iterate_sensitivity_check(&sys, &[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0], 5).unwrap();
        assert_eq!(check.measured, 0.0);
        assert_eq!(check.bound, 0.0);
    }

    #[test]
    fn sensitivity_needs_constants() {
        struct Bare(FeasibleSet);
        impl FollowerSystem for Bare {
            fn follower_dim(&self) -> usize {
                1
            }
            fn feasible_set(&self) -> &FeasibleSet {
                &self.0
            }
            fn potential_gradient(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
                y.to_vec()
            }
            fn step_size(&self) -> f64 {
                0.5
            }
            fn rate(&self) -> RateCertificate {
                RateCertificate::Exponential { c: 1.0, rho: 0.25 }
            }
        }
        let sys = Bare(FeasibleSet::Unconstrained { dim: 1 });
        assert_eq!(
            iterate_sensitivity_check(&sys, &[0.0], &[1.0], &[0.0], 3),
            Err(Error::MissingConstant("l_gx"))
        );
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        struct Broken(FeasibleSet);
        impl FollowerSystem for Broken {
            fn follower_dim(&self) -> usize {
                1
            }
            fn feasible_set(&self) -> &FeasibleSet {
                &self.0
            }
            fn potential_gradient(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
                vec![f64::NAN]
            }
            fn step_size(&self) -> f64 {
                0.5
            }
            fn rate(&self) -> RateCertificate {
                RateCertificate::Exponential { c: 1.0, rho: 0.25 }
            }
        }
        let sys = Broken(FeasibleSet::Unconstrained { dim: 1 });
        assert!(run_inner(&sys, &[0.0], &[0.0], 3, false).is_err());
    }
}
