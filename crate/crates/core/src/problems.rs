//! Benchmark instances with known analytic structure.
//!
//! - [`QuadraticBilevel`]: box-clamped linear response, closed-form `S` and `∇f̃`.
//! - [`TrigBilevel`]: the same lower level under a smooth non-quadratic leader loss.
//! - [`StrictSaddleProblem`]: trivial lower level and a hyper-objective with a
//!   strict saddle at the origin.
//! - [`RoutingInstance`]: toll design on a network with affine latencies, where
//!   the followers route flow to a Wardrop equilibrium.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::RngStream;
use crate::linalg::{check_finite, check_len, distance, norm_sq};
use crate::lower_level::{run_inner, FeasibleSet, FollowerConstants, FollowerSystem, SimplexBlock};
use crate::model::{LeaderProblem, ProblemConstants};
use crate::schedule::RateCertificate;

/// Margin by which `Bx + c` must clear the box for the closed-form gradient.
pub const INTERIOR_MARGIN: f64 = 1e-6;

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    for row in rows {
        check_len("coupling matrix row", cols, row)?;
        check_finite("coupling matrix", row)?;
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Exponential certificate of projected gradient descent with step `γ` on a
/// unit-curvature strongly convex potential: the distance contracts by `1 − γ`.
fn unit_curvature_rate(gamma: f64) -> RateCertificate {
    let q = 1.0 - gamma;
    RateCertificate::Exponential { c: 1.0, rho: q * q }
}

fn check_unit_step(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("follower step size must lie in (0, 1), got {gamma}")))
    }
}

/// Followers minimizing `g(x, y) = ½‖y − Bx − c‖²` over a box by projected
/// gradient steps of size `γ`.
#[derive(Debug, Clone)]
pub struct QuadraticFollowers {
    bmat: DMatrix<f64>,
    c: Vec<f64>,
    set: FeasibleSet,
    gamma: f64,
}

impl QuadraticFollowers {
    fn target(&self, x: &[f64]) -> Vec<f64> {
        let bx = &self.bmat * DVector::from_column_slice(x);
        bx.iter().zip(&self.c).map(|(u, c)| u + c).collect()
    }
}

impl FollowerSystem for QuadraticFollowers {
    fn follower_dim(&self) -> usize {
        self.c.len()
    }
    fn feasible_set(&self) -> &FeasibleSet {
        &self.set
    }
    fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.target(x)).map(|(a, b)| a - b).collect()
    }
    fn potential(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        Some(0.5 * norm_sq(&crate::linalg::sub(y, &self.target(x))))
    }
    fn step_size(&self) -> f64 {
        self.gamma
    }
    fn rate(&self) -> RateCertificate {
        unit_curvature_rate(self.gamma)
    }
    fn constants(&self) -> FollowerConstants {
        FollowerConstants {
            l_gx: Some(spectral_norm(&self.bmat)),
            ell_gy: Some(1.0),
        }
    }
}

/// Shared lower level of the quadratic and trigonometric benchmarks.
#[derive(Debug, Clone)]
struct LinearResponse {
    bmat: DMatrix<f64>,
    c: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    b_norm: f64,
}

impl LinearResponse {
    fn new(bmat: &[Vec<f64>], c: Vec<f64>, set: &FeasibleSet, d: usize) -> Result<Self> {
        let (lo, hi) = match set {
            FeasibleSet::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => return Err(Error::invalid("the follower set of this benchmark must be a box")),
        };
        check_finite("offset c", &c)?;
        check_len("coupling matrix rows", c.len(), &vec![0.0; bmat.len()])?;
        check_len("box bounds", c.len(), &lo)?;
        let bmat = matrix_from_rows(bmat, d)?;
        let b_norm = spectral_norm(&bmat);
        Ok(Self {
            bmat,
            c,
            lo,
            hi,
            b_norm,
        })
    }

    fn unclamped(&self, x: &[f64]) -> Vec<f64> {
        let bx = &self.bmat * DVector::from_column_slice(x);
        bx.iter().zip(&self.c).map(|(u, c)| u + c).collect()
    }

    fn solution(&self, x: &[f64]) -> Vec<f64> {
        self.unclamped(x)
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect()
    }

    /// `Bx + c` when it clears the box by [`INTERIOR_MARGIN`].
    fn interior_response(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.unclamped(x);
        for (j, (&v, (&l, &h))) in u.iter().zip(self.lo.iter().zip(&self.hi)).enumerate() {
            if !(v > l + INTERIOR_MARGIN && v < h - INTERIOR_MARGIN) {
                return Err(Error::BoundaryRegime(format!(
                    "response coordinate {j} = {v} is within {INTERIOR_MARGIN} of [{l}, {h}]"
                )));
            }
        }
        Ok(u)
    }

    fn transpose_times(&self, w: &[f64]) -> Vec<f64> {
        (self.bmat.transpose() * DVector::from_column_slice(w)).iter().copied().collect()
    }

    fn followers(&self, gamma: f64) -> Result<QuadraticFollowers> {
        check_unit_step(gamma)?;
        Ok(QuadraticFollowers {
            bmat: self.bmat.clone(),
            c: self.c.clone(),
            set: FeasibleSet::Box {
                lo: self.lo.clone(),
                hi: self.hi.clone(),
            },
            gamma,
        })
    }
}

/// `f(x, y) = ½‖x − a‖² + ½‖y − b‖²`, `g(x, y) = ½‖y − Bx − c‖²` on a box `Y`,
/// so that `S(x) = clamp(Bx + c, lo, hi)`.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a: Vec<f64>,
    b: Vec<f64>,
    lower: LinearResponse,
}

impl QuadraticBilevel {
    /// `bmat` is given row-wise as a `d′ × d` matrix.
    pub fn new(a: Vec<f64>, b: Vec<f64>, bmat: Vec<Vec<f64>>, c: Vec<f64>, set: FeasibleSet) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::invalid("quadratic benchmark needs positive dimensions"));
        }
        check_finite("leader target a", &a)?;
        check_finite("follower target b", &b)?;
        check_len("offset c", b.len(), &c)?;
        let lower = LinearResponse::new(&bmat, c, &set, a.len())?;
        Ok(Self { a, b, lower })
    }

    /// Instance with `a = 0`, `c = 0`, `b = target·1`, a Gaussian coupling
    /// `B = scale·N(0, 1)^{d×d}` drawn from `instance_seed`, and `Y = [−r, r]^d`.
    pub fn gaussian(d: usize, scale: f64, target: f64, radius: f64, instance_seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(instance_seed, 1);
        let bmat = (0..d)
            .map(|_| (0..d).map(|_| scale * rng.standard_normal()).collect())
            .collect();
        Self::new(
            vec![0.0; d],
            vec![target; d],
            bmat,
            vec![0.0; d],
            FeasibleSet::uniform_box(d, -radius, radius)?,
        )
    }

    /// Followers running projected gradient steps of size `γ ∈ (0, 1)` on `g`.
    pub fn followers(&self, gamma: f64) -> Result<QuadraticFollowers> {
        self.lower.followers(gamma)
    }

    pub fn coupling_norm(&self) -> f64 {
        self.lower.b_norm
    }

    /// Minimizer of the interior hyper-objective, solving `(I + BᵀB)x = a + Bᵀ(b − c)`.
    pub fn interior_optimum(&self) -> Vec<f64> {
        let bm = &self.lower.bmat;
        let d = self.a.len();
        let lhs = DMatrix::identity(d, d) + bm.transpose() * bm;
        let rhs_tail: Vec<f64> = self.b.iter().zip(&self.lower.c).map(|(b, c)| b - c).collect();
        let rhs = DVector::from_column_slice(&self.a) + bm.transpose() * DVector::from_column_slice(&rhs_tail);
        let sol = lhs.cholesky().expect("I + BᵀB is positive definite").solve(&rhs);
        sol.iter().copied().collect()
    }
}

/// `clamp(Bx + c, lo, hi)`
pub fn quad_solution_map(qb: &QuadraticBilevel, x: &[f64]) -> Result<Vec<f64>> {
    check_len("leader strategy", qb.a.len(), x)?;
    Ok(qb.lower.solution(x))
}

/// `(x − a) + Bᵀ(Bx + c − b)`, defined when `Bx + c` is strictly inside the box.
pub fn quad_hypergradient(qb: &QuadraticBilevel, x: &[f64]) -> Result<Vec<f64>> {
    check_len("leader strategy", qb.a.len(), x)?;
    let u = qb.lower.interior_response(x)?;
    let resid: Vec<f64> = u.iter().zip(&qb.b).map(|(u, b)| u - b).collect();
    let back = qb.lower.transpose_times(&resid);
    Ok(x.iter().zip(&qb.a).zip(back).map(|((x, a), r)| x - a + r).collect())
}

impl LeaderProblem for QuadraticBilevel {
    fn leader_dim(&self) -> usize {
        self.a.len()
    }
    fn follower_dim(&self) -> usize {
        self.b.len()
    }
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * distance(x, &self.a).powi(2) + 0.5 * distance(y, &self.b).powi(2)
    }
    fn constants(&self) -> ProblemConstants {
        let bn = self.lower.b_norm;
        ProblemConstants {
            ell_fy: Some(1.0),
            l_s: Some(bn),
            ell_ftilde: Some(1.0 + bn * bn),
            ..Default::default()
        }
    }
    fn solution_map(&self, x: &[f64]) -> Option<Vec<f64>> {
        quad_solution_map(self, x).ok()
    }
    fn hypergradient(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(quad_hypergradient(self, x))
    }
}

/// `f(x, y) = Σ sin xᵢ + Σ cos yⱼ` over the quadratic lower level, a smooth
/// non-quadratic hyper-objective with bounded gradient and Hessian.
#[derive(Debug, Clone)]
pub struct TrigBilevel {
    d: usize,
    lower: LinearResponse,
}

impl TrigBilevel {
    pub fn new(d: usize, bmat: Vec<Vec<f64>>, c: Vec<f64>, set: FeasibleSet) -> Result<Self> {
        if d == 0 || c.is_empty() {
            return Err(Error::invalid("trigonometric benchmark needs positive dimensions"));
        }
        let lower = LinearResponse::new(&bmat, c, &set, d)?;
        Ok(Self { d, lower })
    }

    pub fn followers(&self, gamma: f64) -> Result<QuadraticFollowers> {
        self.lower.followers(gamma)
    }
}

impl LeaderProblem for TrigBilevel {
    fn leader_dim(&self) -> usize {
        self.d
    }
    fn follower_dim(&self) -> usize {
        self.lower.c.len()
    }
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().map(|v| v.sin()).sum::<f64>() + y.iter().map(|v| v.cos()).sum::<f64>()
    }
    /// Global bounds: `‖∇f̃‖ ≤ √d + ‖B‖√d′` and `‖∇²f̃‖ ≤ 1 + ‖B‖²` in the interior.
    fn constants(&self) -> ProblemConstants {
        let bn = self.lower.b_norm;
        let dp = self.lower.c.len() as f64;
        ProblemConstants {
            l_fx: Some((self.d as f64).sqrt()),
            l_fy: Some(dp.sqrt()),
            ell_fy: Some(1.0),
            l_s: Some(bn),
            l_ftilde: Some((self.d as f64).sqrt() + bn * dp.sqrt()),
            ell_ftilde: Some(1.0 + bn * bn),
        }
    }
    fn solution_map(&self, x: &[f64]) -> Option<Vec<f64>> {
        (x.len() == self.d).then(|| self.lower.solution(x))
    }
    fn hypergradient(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        Some((|| {
            check_len("leader strategy", self.d, x)?;
            let u = self.lower.interior_response(x)?;
            let sines: Vec<f64> = u.iter().map(|v| -v.sin()).collect();
            let back = self.lower.transpose_times(&sines);
            Ok(x.iter().zip(back).map(|(x, r)| x.cos() + r).collect())
        })())
    }
}

/// `f̃(x) = ½ xᵀDx + (q/4) Σ xᵢ⁴` with a trivial lower level `g(x, y) = ½y²`
/// (so `S ≡ 0`). With `D` having a negative entry the origin is a strict saddle;
/// the quartic term (`q ≥ 0`) confines trajectories without changing the
/// Hessian at the origin.
#[derive(Debug, Clone)]
pub struct StrictSaddleProblem {
    diag: Vec<f64>,
    quartic: f64,
}

impl StrictSaddleProblem {
    pub fn new(diag: Vec<f64>, quartic: f64) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::invalid("saddle diagonal must be nonempty"));
        }
        check_finite("saddle diagonal", &diag)?;
        if !diag.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("saddle diagonal needs at least one negative entry"));
        }
        if !(quartic.is_finite() && quartic >= 0.0) {
            return Err(Error::invalid(format!("quartic weight must be nonnegative, got {quartic}")));
        }
        Ok(Self { diag, quartic })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// `λ_min(∇²f̃(0))`
    pub fn min_curvature(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Followers on `Y = [−1, 1]` with step size `γ ∈ (0, 1)`.
    pub fn followers(&self, gamma: f64) -> Result<SaddleFollowers> {
        check_unit_step(gamma)?;
        Ok(SaddleFollowers {
            set: FeasibleSet::uniform_box(1, -1.0, 1.0)?,
            gamma,
        })
    }

    pub fn hyper_objective_at(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.diag)
            .map(|(x, d)| 0.5 * d * x * x + 0.25 * self.quartic * x.powi(4))
            .sum()
    }
}

impl LeaderProblem for StrictSaddleProblem {
    fn leader_dim(&self) -> usize {
        self.diag.len()
    }
    fn follower_dim(&self) -> usize {
        1
    }
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        self.hyper_objective_at(x) + 0.5 * norm_sq(y)
    }
    fn constants(&self) -> ProblemConstants {
        ProblemConstants {
            l_fy: Some(1.0),
            ell_fy: Some(1.0),
            l_s: Some(0.0),
            // The quartic term has unbounded curvature.
            ell_ftilde: (self.quartic == 0.0)
                .then(|| self.diag.iter().fold(0.0f64, |m, v| m.max(v.abs()))),
            ..Default::default()
        }
    }
    fn solution_map(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0])
    }
    fn hypergradient(&self, x: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(check_len("leader strategy", self.diag.len(), x).map(|_| {
            x.iter()
                .zip(&self.diag)
                .map(|(x, d)| d * x + self.quartic * x.powi(3))
                .collect()
        }))
    }
}

/// `g(x, y) = ½y²` on `[−1, 1]`, independent of the leader.
#[derive(Debug, Clone)]
pub struct SaddleFollowers {
    set: FeasibleSet,
    gamma: f64,
}

impl FollowerSystem for SaddleFollowers {
    fn follower_dim(&self) -> usize {
        1
    }
    fn feasible_set(&self) -> &FeasibleSet {
        &self.set
    }
    fn potential_gradient(&self, _x: &[f64], y: &[f64]) -> Vec<f64> {
        y.to_vec()
    }
    fn potential(&self, _x: &[f64], y: &[f64]) -> Option<f64> {
        Some(0.5 * norm_sq(y))
    }
    fn step_size(&self) -> f64 {
        self.gamma
    }
    fn rate(&self) -> RateCertificate {
        unit_curvature_rate(self.gamma)
    }
    fn constants(&self) -> FollowerConstants {
        FollowerConstants {
            l_gx: Some(0.0),
            ell_gy: Some(1.0),
        }
    }
}

/// Replaces the followers' update with the analytic solution map: every call to
/// `respond` returns `S(x)` exactly, so inner runs carry no approximation error.
pub struct ExactResponder<P, S> {
    problem: P,
    followers: S,
}

impl<P: LeaderProblem, S: FollowerSystem> ExactResponder<P, S> {
    pub fn new(problem: P, followers: S) -> Result<Self> {
        if problem.solution_map(&vec![0.0; problem.leader_dim()]).is_none() {
            return Err(Error::MissingAnalytic("solution map"));
        }
        Ok(Self { problem, followers })
    }
}

impl<P: LeaderProblem, S: FollowerSystem> FollowerSystem for ExactResponder<P, S> {
    fn follower_dim(&self) -> usize {
        self.followers.follower_dim()
    }
    fn feasible_set(&self) -> &FeasibleSet {
        self.followers.feasible_set()
    }
    fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.followers.potential_gradient(x, y)
    }
    fn potential(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        self.followers.potential(x, y)
    }
    fn step_size(&self) -> f64 {
        self.followers.step_size()
    }
    fn rate(&self) -> RateCertificate {
        self.followers.rate()
    }
    fn constants(&self) -> FollowerConstants {
        self.followers.constants()
    }
    fn respond(&self, x: &[f64], _y: &[f64]) -> Result<Vec<f64>> {
        self.problem
            .solution_map(x)
            .ok_or(Error::MissingAnalytic("solution map"))
    }
}

/// Edge identifier in routing instance files: a string or a nonnegative integer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeId {
    Num(u64),
    Name(String),
}

impl std::fmt::Display for EdgeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EdgeId::Num(n) => write!(f, "{n}"),
            EdgeId::Name(s) => write!(f, "{s:?}"),
        }
    }
}

/// Edge with affine latency `ℓ(θ) = aθ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdPair {
    pub demand: f64,
    /// Each path is a list of edge ids.
    pub paths: Vec<Vec<EdgeId>>,
}

/// File-level description of a routing instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSpec {
    pub edges: Vec<Edge>,
    pub od_pairs: Vec<OdPair>,
    #[serde(default)]
    pub lambda: f64,
}

/// Validated routing game.
///
/// The leader sets one toll per edge (`x = p ∈ ℝ^{|E|}`, negative tolls are
/// subsidies). Followers choose path flows `q` in a product of simplices scaled by
/// the demands; edge flows are `w = Aq` for the edge-path incidence `A`. The
/// followers' potential is the Beckmann function
/// `Φ(q, p) = Σ_e a_e w_e²/2 + (b_e + p_e) w_e` and the leader's loss is
/// `f(p, q) = Σ_e w_e ℓ_e(w_e) + λ‖p‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoutingSpec", into = "RoutingSpec")]
pub struct RoutingInstance {
    spec: RoutingSpec,
    /// Edge indices of each path, paths ordered by OD pair.
    paths: Vec<Vec<usize>>,
    blocks: Vec<SimplexBlock>,
    slope: Vec<f64>,
    intercept: Vec<f64>,
    /// Extreme eigenvalues of `Aᵀdiag(a)A` restricted to the tangent space of `Q`.
    tangent_curvature: (f64, f64),
    /// Largest eigenvalue of `Aᵀdiag(a)A` on all of path space.
    full_curvature: f64,
    incidence_norm: f64,
}

impl From<RoutingInstance> for RoutingSpec {
    fn from(inst: RoutingInstance) -> Self {
        inst.spec
    }
}

impl TryFrom<RoutingSpec> for RoutingInstance {
    type Error = Error;

    fn try_from(spec: RoutingSpec) -> Result<Self> {
        RoutingInstance::new(spec)
    }
}

impl RoutingInstance {
    pub fn new(spec: RoutingSpec) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        if spec.edges.is_empty() {
            return bad("no edges".into());
        }
        if spec.od_pairs.is_empty() {
            return bad("no od_pairs".into());
        }
        if !(spec.lambda.is_finite() && spec.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", spec.lambda));
        }
        let mut index = HashMap::new();
        for (i, e) in spec.edges.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return bad(format!("duplicate edge id {}", e.id));
            }
            if !(e.a.is_finite() && e.a >= 0.0) {
                return bad(format!("edge {}: latency slope a must be nonnegative, got {}", e.id, e.a));
            }
            if !(e.b.is_finite() && e.b >= 0.0) {
                return bad(format!("edge {}: latency intercept b must be nonnegative, got {}", e.id, e.b));
            }
        }
        let mut paths = Vec::new();
        let mut blocks = Vec::new();
        for (z, od) in spec.od_pairs.iter().enumerate() {
            if !(od.demand.is_finite() && od.demand > 0.0) {
                return bad(format!("od_pairs[{z}]: demand must be positive, got {}", od.demand));
            }
            if od.paths.is_empty() {
                return bad(format!("od_pairs[{z}]: no paths"));
            }
            blocks.push(SimplexBlock {
                start: paths.len(),
                len: od.paths.len(),
                mass: od.demand,
            });
            for (k, path) in od.paths.iter().enumerate() {
                if path.is_empty() {
                    return bad(format!("od_pairs[{z}].paths[{k}] is empty"));
                }
                let mut edges = Vec::with_capacity(path.len());
                for id in path {
                    let Some(&e) = index.get(id) else {
                        return bad(format!("od_pairs[{z}].paths[{k}] references unknown edge id {id}"));
                    };
                    if edges.contains(&e) {
                        return bad(format!("od_pairs[{z}].paths[{k}] repeats edge id {id}"));
                    }
                    edges.push(e);
                }
                paths.push(edges);
            }
        }

        let n_paths = paths.len();
        let n_edges = spec.edges.len();
        let incidence = DMatrix::from_fn(n_edges, n_paths, |e, p| if paths[p].contains(&e) { 1.0 } else { 0.0 });
        let slope: Vec<f64> = spec.edges.iter().map(|e| e.a).collect();
        let intercept: Vec<f64> = spec.edges.iter().map(|e| e.b).collect();
        let hessian = incidence.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&slope)) * &incidence;
        let full_curvature = SymmetricEigen::new(hessian.clone()).eigenvalues.max();

        // Tangent basis of Q: within each block, e_first − e_k.
        let mut basis = Vec::new();
        for b in &blocks {
            for k in 1..b.len {
                let mut col = vec![0.0; n_paths];
                col[b.start] = 1.0;
                col[b.start + k] = -1.0;
                basis.push(col);
            }
        }
        let tangent_curvature = if basis.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let z = DMatrix::from_fn(n_paths, basis.len(), |i, j| basis[j][i]);
            let gram = z.transpose() * &z;
            let reduced = z.transpose() * &hessian * &z;
            // Generalized eigenvalues of (ZᵀHZ, ZᵀZ) via the Cholesky factor of ZᵀZ.
            let chol = gram.cholesky().expect("tangent basis is linearly independent");
            let l_inv = chol.l().try_inverse().expect("Cholesky factor is invertible");
            let whitened = &l_inv * reduced * l_inv.transpose();
            let eig = SymmetricEigen::new(0.5 * (&whitened + whitened.transpose())).eigenvalues;
            (eig.min(), eig.max())
        };
        if tangent_curvature.0 <= 1e-10 * full_curvature.max(1.0) {
            return bad(
                "Beckmann potential is not strictly convex on the flow polytope; \
                 some pair of alternative paths differs only in zero-slope edges"
                    .into(),
            );
        }
        let incidence_norm = spectral_norm(&incidence);
        Ok(Self {
            spec,
            paths,
            blocks,
            slope,
            intercept,
            tangent_curvature,
            full_curvature,
            incidence_norm,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: RoutingSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidInstance(e.to_string()))?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &RoutingSpec {
        &self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.lambda = lambda;
        Self::new(spec)
    }

    pub fn num_edges(&self) -> usize {
        self.slope.len()
    }

    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    /// The product of demand-scaled simplices `Q`.
    pub fn flow_set(&self) -> FeasibleSet {
        FeasibleSet::Simplices {
            dim: self.num_paths(),
            blocks: self.blocks.clone(),
        }
    }

    /// `w_e(q) = Σ_{paths ∋ e} q_path`
    pub fn edge_flows(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len("path flows", self.num_paths(), q)?;
        Ok(self.flows_unchecked(q))
    }

    fn flows_unchecked(&self, q: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.num_edges()];
        for (path, &flow) in self.paths.iter().zip(q) {
            for &e in path {
                w[e] += flow;
            }
        }
        w
    }

    /// `Φ(q, p) = Σ_e a_e w_e²/2 + b_e w_e + p_e w_e`
    pub fn beckmann_potential(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        check_len("tolls", self.num_edges(), p)?;
        let w = self.edge_flows(q)?;
        Ok(self.potential_from_flows(&w, p))
    }

    fn potential_from_flows(&self, w: &[f64], p: &[f64]) -> f64 {
        (0..w.len())
            .map(|e| 0.5 * self.slope[e] * w[e] * w[e] + (self.intercept[e] + p[e]) * w[e])
            .sum()
    }

    /// Path costs `c_path = Σ_{e ∈ path} ℓ_e(w_e) + p_e`, which equal `∇_q Φ`.
    pub fn beckmann_gradient(&self, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        check_len("path flows", self.num_paths(), q)?;
        check_len("tolls", self.num_edges(), p)?;
        Ok(self.path_costs_unchecked(q, p))
    }

    fn path_costs_unchecked(&self, q: &[f64], p: &[f64]) -> Vec<f64> {
        let w = self.flows_unchecked(q);
        let edge_cost: Vec<f64> = (0..w.len())
            .map(|e| self.slope[e] * w[e] + self.intercept[e] + p[e])
            .collect();
        self.paths.iter().map(|path| path.iter().map(|&e| edge_cost[e]).sum()).collect()
    }

    /// `f(p, q) = Σ_e w_e ℓ_e(w_e) + λ‖p‖²`
    pub fn leader_routing_objective(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        check_len("tolls", self.num_edges(), p)?;
        check_len("path flows", self.num_paths(), q)?;
        Ok(self.objective_unchecked(p, q))
    }

    fn objective_unchecked(&self, p: &[f64], q: &[f64]) -> f64 {
        let w = self.flows_unchecked(q);
        let congestion: f64 = (0..w.len())
            .map(|e| w[e] * (self.slope[e] * w[e] + self.intercept[e]))
            .sum();
        congestion + self.spec.lambda * norm_sq(p)
    }

    /// Grid minimizer of `Φ(·, p)` over `Q`: each OD pair's demand is split in
    /// units of `demand/grid` across its paths. Test oracle for at most four paths.
    pub fn wardrop_bruteforce(&self, p: &[f64], grid: usize) -> Result<Vec<f64>> {
        check_len("tolls", self.num_edges(), p)?;
        check_finite("tolls", p)?;
        if grid == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        if self.num_paths() > 4 {
            return Err(Error::invalid(format!(
                "brute-force equilibrium supports at most 4 paths, instance has {}",
                self.num_paths()
            )));
        }
        // Per block, every composition of `grid` into `len` nonnegative parts.
        let block_points: Vec<Vec<Vec<usize>>> = self.blocks.iter().map(|b| compositions(grid, b.len)).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut choice = vec![0usize; self.blocks.len()];
        let mut q = vec![0.0; self.num_paths()];
        loop {
            for (bi, b) in self.blocks.iter().enumerate() {
                let units = &block_points[bi][choice[bi]];
                for (k, &u) in units.iter().enumerate() {
                    q[b.start + k] = b.mass * u as f64 / grid as f64;
                }
            }
            let value = self.potential_from_flows(&self.flows_unchecked(&q), p);
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                best = Some((value, q.clone()));
            }
            // Odometer increment over the blocks.
            let mut i = 0;
            loop {
                if i == choice.len() {
                    return Ok(best.expect("grid is nonempty").1);
                }
                choice[i] += 1;
                if choice[i] < block_points[i].len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }

    /// Followers routing by projected gradient steps of size `γ` on `Φ(·, p)`.
    pub fn followers(&self, gamma: f64) -> Result<RoutingFollowers> {
        let max_step = 2.0 / self.full_curvature;
        if !(gamma > 0.0 && gamma < max_step) {
            return Err(Error::invalid(format!(
                "routing step size must lie in (0, {max_step}), got {gamma}"
            )));
        }
        Ok(RoutingFollowers {
            instance: Arc::new(self.clone()),
            set: self.flow_set(),
            gamma,
        })
    }

    /// A step size that is safe for the followers: `1/λ_max(AᵀDiag(a)A)`.
    pub fn default_step(&self) -> f64 {
        1.0 / self.full_curvature
    }

    /// Uniform split of each OD demand across its paths.
    pub fn uniform_flows(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.num_paths()];
        for b in &self.blocks {
            for k in 0..b.len {
                q[b.start + k] = b.mass / b.len as f64;
            }
        }
        q
    }

    /// Wardrop equilibrium at tolls `p` by projected gradient descent from the
    /// uniform split, run until successive iterates move less than `1e-13`.
    pub fn equilibrium(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_len("tolls", self.num_edges(), p)?;
        let sys = self.followers(self.default_step())?;
        let mut y = self.uniform_flows();
        for _ in 0..200 {
            let run = run_inner(&sys, p, &y, 1000, false)?;
            y = run.y_final.into_inner();
            if run.residual <= 1e-13 {
                return Ok(y);
            }
        }
        Err(Error::NotConverged("routing equilibrium did not converge".into()))
    }
}

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl LeaderProblem for RoutingInstance {
    fn leader_dim(&self) -> usize {
        self.num_edges()
    }
    fn follower_dim(&self) -> usize {
        self.num_paths()
    }
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        if x.len() != self.num_edges() || y.len() != self.num_paths() {
            return f64::NAN;
        }
        self.objective_unchecked(x, y)
    }
    fn solution_map(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.equilibrium(x).ok()
    }
}

/// Path-flow followers of a [`RoutingInstance`].
#[derive(Debug, Clone)]
pub struct RoutingFollowers {
    instance: Arc<RoutingInstance>,
    set: FeasibleSet,
    gamma: f64,
}

impl FollowerSystem for RoutingFollowers {
    fn follower_dim(&self) -> usize {
        self.instance.num_paths()
    }
    fn feasible_set(&self) -> &FeasibleSet {
        &self.set
    }
    fn potential_gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        if x.len() != self.instance.num_edges() || y.len() != self.instance.num_paths() {
            return vec![f64::NAN; y.len()];
        }
        self.instance.path_costs_unchecked(y, x)
    }
    fn potential(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        self.instance.beckmann_potential(y, x).ok()
    }
    fn step_size(&self) -> f64 {
        self.gamma
    }
    /// Projected gradient on a `μ`-strongly convex, `L`-smooth restriction to `Q`
    /// contracts the distance by `max(|1 − γμ|, |1 − γL|)`.
    fn rate(&self) -> RateCertificate {
        let (mu, l) = self.instance.tangent_curvature;
        let q = (1.0 - self.gamma * mu).abs().max((1.0 - self.gamma * l).abs());
        RateCertificate::Exponential {
            c: 1.0,
            rho: (q * q).max(f64::EPSILON),
        }
    }
    fn constants(&self) -> FollowerConstants {
        FollowerConstants {
            l_gx: Some(self.instance.incidence_norm),
            ell_gy: Some(self.instance.full_curvature),
        }
    }
}
