//! Experiment configuration: JSON schema, defaults and validation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zostack::problems::{QuadraticBilevel, RoutingInstance, RoutingSpec, StrictSaddleProblem};
use zostack::{FeasibleSet, FollowerSystem, InnerBudget, LeaderProblem};

use crate::CliError;

/// Follower contraction used when neither `gamma` nor `rho` is given.
pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_DELTA_BAR: f64 = 0.5;
pub const DEFAULT_REPLICATES: usize = 20;

/// `"auto"` or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "KRaw", into = "KRaw")]
pub struct KSpec(pub InnerBudget);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum KRaw {
    Num(usize),
    Word(String),
}

impl TryFrom<KRaw> for KSpec {
    type Error = String;
    fn try_from(raw: KRaw) -> Result<Self, String> {
        match raw {
            KRaw::Num(0) => Err("K must be a positive integer or \"auto\"".into()),
            KRaw::Num(k) => Ok(KSpec(InnerBudget::Fixed(k))),
            KRaw::Word(w) if w == "auto" => Ok(KSpec(InnerBudget::Auto)),
            KRaw::Word(w) => Err(format!("K must be a positive integer or \"auto\", got {w:?}")),
        }
    }
}

impl From<KSpec> for KRaw {
    fn from(k: KSpec) -> Self {
        match k.0 {
            InnerBudget::Fixed(n) => KRaw::Num(n),
            InnerBudget::Auto => KRaw::Word("auto".into()),
        }
    }
}

impl std::fmt::Display for KSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            InnerBudget::Fixed(n) => write!(f, "{n}"),
            InnerBudget::Auto => write!(f, "auto"),
        }
    }
}

/// Quadratic benchmark. Without `B` the instance is generated: `a = c = 0`,
/// `b = target·1`, `B = coupling_scale·N(0,1)` from `instance_seed`, box `±radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticParams {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_coupling")]
    pub coupling_scale: f64,
    #[serde(default = "default_target")]
    pub target: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub instance_seed: u64,
    pub a: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    #[serde(rename = "B")]
    pub bmat: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<f64>>,
    /// Follower step size; defaults to `1 − √rho`.
    pub gamma: Option<f64>,
    /// Squared-distance contraction per follower step.
    pub rho: Option<f64>,
}

fn default_d() -> usize {
    2
}
fn default_coupling() -> f64 {
    0.5
}
fn default_target() -> f64 {
    10.0
}
fn default_radius() -> f64 {
    100.0
}
fn default_diag() -> Vec<f64> {
    vec![1.0, -1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleParams {
    #[serde(default = "default_diag")]
    pub diag: Vec<f64>,
    #[serde(default)]
    pub quartic: f64,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
}

/// Path to an instance file (relative to the config file) or the instance inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceSource {
    Path(PathBuf),
    Inline(RoutingSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingParams {
    pub instance: InstanceSource,
    /// Follower step size; defaults to `1/λ_max` of the Beckmann Hessian.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticParams),
    StrictSaddle(SaddleParams),
    Routing(RoutingParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K", default = "default_k")]
    pub inner: KSpec,
    /// Defaults to `d/(4ℓ_f̃)` when `ℓ_f̃` is known, else `0.1·d`.
    pub eta_bar: Option<f64>,
    #[serde(default = "default_delta_bar")]
    pub delta_bar: f64,
    /// Defaults to the origin.
    pub x0: Option<Vec<f64>>,
    /// Defaults to the projection of the origin onto the followers' set.
    pub y0: Option<Vec<f64>>,
    #[serde(default)]
    pub record_inner: bool,
}

fn default_k() -> KSpec {
    KSpec(InnerBudget::Auto)
}
fn default_delta_bar() -> f64 {
    DEFAULT_DELTA_BAR
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "T")]
    pub rounds: Option<Vec<usize>>,
    #[serde(rename = "K")]
    pub inner: Option<Vec<KSpec>>,
    pub d: Option<Vec<usize>>,
    pub rho: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub error_decomposition: bool,
    pub shadow: bool,
    pub saddle_escape: bool,
    pub rate_fit: bool,
    /// Fresh directions per round for the conditional mean.
    pub n_mc: usize,
    /// Rounds decomposed per run, spread evenly over the horizon.
    pub decomposition_rounds: usize,
    pub shadow_horizon: usize,
    /// An earlier and a later anchor; the later sup-gap must be smaller.
    pub shadow_anchors: [usize; 2],
    pub escape_epsilon: f64,
    pub escape_fraction: f64,
    /// Admissible range of the log-log slope of min-stationarity versus `T`.
    pub rate_slope: [f64; 2],
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            error_decomposition: false,
            shadow: false,
            saddle_escape: false,
            rate_fit: false,
            n_mc: 10_000,
            decomposition_rounds: 8,
            shadow_horizon: 16,
            shadow_anchors: [32, 512],
            escape_epsilon: 0.01,
            escape_fraction: 0.95,
            rate_slope: [-0.7, -0.3],
        }
    }
}

impl DiagnosticsConfig {
    pub fn any(&self) -> bool {
        self.error_decomposition || self.shadow || self.saddle_escape || self.rate_fit
    }
}

/// The configuration document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: ProblemConfig,
    pub solver: SolverParams,
    pub replicates: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub seed_base: Option<u64>,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    pub output_dir: Option<PathBuf>,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K")]
    pub inner: KSpec,
    pub d: Option<usize>,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
}

impl CellKey {
    /// File-system friendly label, unique within a sweep.
    pub fn label(&self) -> String {
        let mut s = format!("T{}_K{}", self.rounds, self.inner);
        if let Some(d) = self.d {
            s.push_str(&format!("_d{d}"));
        }
        if let Some(r) = self.rho {
            s.push_str(&format!("_rho{r}"));
        }
        if let Some(l) = self.lambda {
            s.push_str(&format!("_lambda{l}"));
        }
        s
    }
}

/// Validated configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub solver: SolverParams,
    pub replicates: usize,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepConfig>,
    pub diagnostics: DiagnosticsConfig,
    pub output_dir: PathBuf,
    /// Routing instance resolved from its file, if any.
    #[serde(skip)]
    pub routing: Option<RoutingInstance>,
    /// Whether `seeds` was given as an explicit list.
    #[serde(skip)]
    pub explicit_seeds: bool,
}

/// A constructed benchmark with its followers, ready to run.
pub enum BuiltProblem {
    Quadratic(QuadraticBilevel, zostack::problems::QuadraticFollowers),
    Saddle(StrictSaddleProblem, zostack::problems::SaddleFollowers),
    Routing(RoutingInstance, zostack::problems::RoutingFollowers),
}

impl BuiltProblem {
    pub fn leader(&self) -> &dyn LeaderProblem {
        match self {
            BuiltProblem::Quadratic(p, _) => p,
            BuiltProblem::Saddle(p, _) => p,
            BuiltProblem::Routing(p, _) => p,
        }
    }

    pub fn followers(&self) -> &dyn FollowerSystem {
        match self {
            BuiltProblem::Quadratic(_, f) => f,
            BuiltProblem::Saddle(_, f) => f,
            BuiltProblem::Routing(_, f) => f,
        }
    }
}

/// A cell with its problem and the solver configuration minus the seed.
pub struct Cell {
    pub index: usize,
    pub key: CellKey,
    pub problem: BuiltProblem,
    pub solver: zostack::SolverConfig,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn gamma_from(gamma: Option<f64>, rho: Option<f64>, path: &str) -> Result<f64, CliError> {
    match (gamma, rho) {
        (_, Some(r)) => {
            if !(r > 0.0 && r < 1.0) {
                return Err(cfg_err(format!("{path}.rho: must lie in (0, 1), got {r}")));
            }
            Ok(1.0 - r.sqrt())
        }
        (Some(g), None) => Ok(g),
        (None, None) => Ok(1.0 - DEFAULT_RHO.sqrt()),
    }
}

/// The tagged `problem` enum buffers its content, which hides the failing
/// field. Re-deserializes the variant's parameters to recover the full path.
fn problem_error_detail(text: &str) -> Option<String> {
    fn check<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Option<String> {
        serde_path_to_error::deserialize::<_, T>(v)
            .err()
            .map(|e| {
                let path = e.path().to_string();
                format!("problem.{path}: {}", e.into_inner())
            })
    }
    let mut problem = serde_json::from_str::<serde_json::Value>(text).ok()?.get("problem")?.clone();
    let kind = problem.as_object_mut()?.remove("kind")?;
    match kind.as_str()? {
        "quadratic" => check::<QuadraticParams>(problem),
        "strict_saddle" => check::<SaddleParams>(problem),
        "routing" => check::<RoutingParams>(problem),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative instance paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "problem" {
                if let Some(detail) = problem_error_detail(text) {
                    return cfg_err(detail);
                }
            }
            cfg_err(format!("{path}: {}", e.into_inner()))
        })?;
        Self::from_raw(raw, base_dir)
    }

    pub fn from_raw(raw: RawConfig, base_dir: &Path) -> Result<Self, CliError> {
        let replicates = raw.replicates.unwrap_or(DEFAULT_REPLICATES);
        if replicates == 0 {
            return Err(cfg_err("replicates: must be positive"));
        }
        let explicit_seeds = raw.seeds.is_some();
        let seeds = match raw.seeds {
            Some(seeds) => {
                if seeds.is_empty() {
                    return Err(cfg_err("seeds: must be nonempty"));
                }
                seeds
            }
            None => {
                let base = raw.seed_base.unwrap_or(0);
                (0..replicates as u64)
                    .map(|i| {
                        base.checked_add(i)
                            .ok_or_else(|| cfg_err("seed_base: seeds overflow u64"))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        let mut seen = HashSet::new();
        for s in &seeds {
            if !seen.insert(*s) {
                return Err(cfg_err(format!("seeds: duplicate seed {s}")));
            }
        }
        if raw.solver.rounds == 0 {
            return Err(cfg_err("solver.T: must be positive"));
        }
        if let Some(sw) = &raw.sweep {
            let lens = [
                ("T", sw.rounds.as_ref().map(Vec::len)),
                ("K", sw.inner.as_ref().map(Vec::len)),
                ("d", sw.d.as_ref().map(Vec::len)),
                ("rho", sw.rho.as_ref().map(Vec::len)),
                ("lambda", sw.lambda.as_ref().map(Vec::len)),
            ];
            for (name, len) in lens {
                if len == Some(0) {
                    return Err(cfg_err(format!("sweep.{name}: must be nonempty when present")));
                }
            }
            if sw.rounds.as_ref().is_some_and(|v| v.contains(&0)) {
                return Err(cfg_err("sweep.T: entries must be positive"));
            }
        }
        let routing = match &raw.problem {
            ProblemConfig::Routing(r) => Some(load_routing(&r.instance, base_dir)?),
            _ => None,
        };
        let cfg = ExperimentConfig {
            seeds,
            replicates,
            problem: raw.problem,
            solver: raw.solver,
            sweep: raw.sweep,
            diagnostics: raw.diagnostics,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("zostack_out")),
            routing,
            explicit_seeds,
        };
        // Building every cell surfaces dimension and parameter errors up front.
        for key in cfg.cells(true) {
            cfg.build_cell(0, key)?;
        }
        Ok(cfg)
    }

    /// Replaces generated seeds with `base, base+1, …` (explicit lists are kept).
    pub fn with_seed_base(mut self, base: u64) -> Self {
        if !self.explicit_seeds {
            self.seeds = (0..self.replicates as u64).map(|i| base.wrapping_add(i)).collect();
        }
        self
    }

    /// The base cell, or the sweep grid in nested order `T, K, d, rho, lambda`.
    pub fn cells(&self, include_sweep: bool) -> Vec<CellKey> {
        let base = CellKey {
            rounds: self.solver.rounds,
            inner: self.solver.inner,
            d: None,
            rho: None,
            lambda: None,
        };
        let sweep = match (&self.sweep, include_sweep) {
            (Some(s), true) => s.clone(),
            _ => return vec![base],
        };
        let ts = sweep.rounds.unwrap_or_else(|| vec![base.rounds]);
        let ks = sweep.inner.unwrap_or_else(|| vec![base.inner]);
        let ds: Vec<Option<usize>> = sweep.d.map_or(vec![None], |v| v.into_iter().map(Some).collect());
        let rhos: Vec<Option<f64>> = sweep.rho.map_or(vec![None], |v| v.into_iter().map(Some).collect());
        let lambdas: Vec<Option<f64>> = sweep.lambda.map_or(vec![None], |v| v.into_iter().map(Some).collect());
        let mut out = Vec::new();
        for &rounds in &ts {
            for &inner in &ks {
                for &d in &ds {
                    for &rho in &rhos {
                        for &lambda in &lambdas {
                            out.push(CellKey {
                                rounds,
                                inner,
                                d,
                                rho,
                                lambda,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn build_cell(&self, index: usize, key: CellKey) -> Result<Cell, CliError> {
        let label = key.label();
        let ctx = |e: zostack::Error| cfg_err(format!("cell {label}: {e}"));
        let problem = match &self.problem {
            ProblemConfig::Quadratic(q) => {
                if key.lambda.is_some() {
                    return Err(cfg_err("sweep.lambda: only applies to routing problems"));
                }
                let gamma = gamma_from(q.gamma, key.rho.or(q.rho), "problem")?;
                let qb = match &q.bmat {
                    Some(bmat) => {
                        if key.d.is_some() {
                            return Err(cfg_err("sweep.d: requires a generated quadratic instance (omit B)"));
                        }
                        let a = q.a.clone().ok_or_else(|| cfg_err("problem.a: required with B"))?;
                        let b = q.b.clone().ok_or_else(|| cfg_err("problem.b: required with B"))?;
                        let c = q.c.clone().unwrap_or_else(|| vec![0.0; b.len()]);
                        let set = FeasibleSet::uniform_box(b.len(), -q.radius, q.radius).map_err(ctx)?;
                        QuadraticBilevel::new(a, b, bmat.clone(), c, set).map_err(ctx)?
                    }
                    None => {
                        if q.a.is_some() || q.b.is_some() || q.c.is_some() {
                            return Err(cfg_err("problem: a, b and c require an explicit B"));
                        }
                        let d = key.d.unwrap_or(q.d);
                        if d == 0 {
                            return Err(cfg_err("problem.d: must be positive"));
                        }
                        QuadraticBilevel::gaussian(d, q.coupling_scale, q.target, q.radius, q.instance_seed)
                            .map_err(ctx)?
                    }
                };
                let f = qb.followers(gamma).map_err(ctx)?;
                BuiltProblem::Quadratic(qb, f)
            }
            ProblemConfig::StrictSaddle(s) => {
                if key.d.is_some() || key.lambda.is_some() {
                    return Err(cfg_err("sweep: only T, K and rho apply to strict_saddle problems"));
                }
                let gamma = gamma_from(s.gamma, key.rho.or(s.rho), "problem")?;
                let p = StrictSaddleProblem::new(s.diag.clone(), s.quartic).map_err(ctx)?;
                let f = p.followers(gamma).map_err(ctx)?;
                BuiltProblem::Saddle(p, f)
            }
            ProblemConfig::Routing(r) => {
                if key.d.is_some() || key.rho.is_some() {
                    return Err(cfg_err("sweep: only T, K and lambda apply to routing problems"));
                }
                let mut inst = self.routing.clone().expect("routing instance loaded");
                if let Some(l) = key.lambda {
                    inst = inst.with_lambda(l).map_err(ctx)?;
                }
                let gamma = r.gamma.unwrap_or_else(|| inst.default_step());
                let f = inst.followers(gamma).map_err(ctx)?;
                BuiltProblem::Routing(inst, f)
            }
        };

        let leader = problem.leader();
        let followers = problem.followers();
        let d = leader.leader_dim();
        let eta_bar = self.solver.eta_bar.unwrap_or_else(|| match leader.constants().ell_ftilde {
            Some(ell) if ell > 0.0 => d as f64 / (4.0 * ell),
            _ => 0.1 * d as f64,
        });
        let schedule = zostack::ScheduleParams::new(eta_bar, self.solver.delta_bar, d)
            .map_err(|e| cfg_err(format!("solver: {e}")))?;
        let x0 = self.solver.x0.clone().unwrap_or_else(|| vec![0.0; d]);
        if x0.len() != d {
            return Err(cfg_err(format!("solver.x0: expected length {d}, got {}", x0.len())));
        }
        let y0 = match &self.solver.y0 {
            Some(y) => y.clone(),
            None => followers
                .project(&vec![0.0; followers.follower_dim()])
                .map_err(ctx)?,
        };
        if y0.len() != followers.follower_dim() {
            return Err(cfg_err(format!(
                "solver.y0: expected length {}, got {}",
                followers.follower_dim(),
                y0.len()
            )));
        }
        if !followers.is_feasible(&y0) {
            return Err(cfg_err("solver.y0: not in the followers' feasible set"));
        }
        schedule
            .check_step_bound(leader.constants().ell_ftilde)
            .map_err(|e| cfg_err(format!("solver.eta_bar: {e}")))?;
        let solver = zostack::SolverConfig {
            rounds: key.rounds,
            inner: key.inner.0,
            schedule,
            seed: 0,
            x0: zostack::LeaderStrategy::new(x0).map_err(ctx)?,
            y0: zostack::FollowerProfile::new(y0).map_err(ctx)?,
            record_inner: self.solver.record_inner,
        };
        zostack::solver::resolve_inner_iterations(followers, &solver).map_err(ctx)?;
        Ok(Cell {
            index,
            key,
            problem,
            solver,
        })
    }
}

fn load_routing(source: &InstanceSource, base_dir: &Path) -> Result<RoutingInstance, CliError> {
    match source {
        InstanceSource::Inline(spec) => {
            RoutingInstance::new(spec.clone()).map_err(|e| cfg_err(format!("problem.instance: {e}")))
        }
        InstanceSource::Path(p) => {
            let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| cfg_err(format!("problem.instance: cannot read {}: {e}", path.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let spec: RoutingSpec = serde_path_to_error::deserialize(de).map_err(|e| {
                cfg_err(format!("problem.instance ({}): {}: {}", path.display(), e.path(), e.inner()))
            })?;
            RoutingInstance::new(spec).map_err(|e| cfg_err(format!("problem.instance: {e}")))
        }
    }
}
