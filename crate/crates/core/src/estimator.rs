//! Unit-sphere sampling and the two-point zeroth-order gradient estimators.
//!
//! The practical estimator uses the leader's loss at the followers' `K`-step
//! responses; the oracle estimator uses exact hyper-objective values. Both have
//! the form `(d/δ)(f(x + δv) − f(x)) v`, so they only differ in where the two
//! scalars come from. This module never touches the lower level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, norm};

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose output is specified independently of the platform.
/// Distinct replicates should use distinct stream ids (or seeds).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Draws `v ~ Unif(𝒮(ℝᵈ))` by normalizing `d` standard normals.
    pub fn sample_unit_sphere(&mut self, d: usize) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(Error::invalid("sphere dimension must be positive"));
        }
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| self.standard_normal()).collect();
            let n = norm(&v);
            // A numerically zero Gaussian vector has probability ~0; redraw it.
            if n > 1e-150 && n.is_finite() {
                v.iter_mut().for_each(|c| *c /= n);
                return Ok(v);
            }
        }
    }
}

/// Convenience wrapper over [`RngStream::sample_unit_sphere`].
pub fn sample_unit_sphere(rng: &mut RngStream, d: usize) -> Result<Vec<f64>> {
    rng.sample_unit_sphere(d)
}

/// A perturbation direction on the unit sphere together with its radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    v: Vec<f64>,
    delta: f64,
}

impl Perturbation {
    pub fn new(v: Vec<f64>, delta: f64) -> Result<Self> {
        check_finite("perturbation direction", &v)?;
        if (norm(&v) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("perturbation direction must have unit norm"));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("perturbation radius must be positive, got {delta}")));
        }
        Ok(Self { v, delta })
    }

    pub fn direction(&self) -> &[f64] {
        &self.v
    }

    pub fn radius(&self) -> f64 {
        self.delta
    }

    /// `x + δv`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.v).map(|(xi, vi)| xi + self.delta * vi).collect()
    }
}

fn scaled_difference(d: usize, delta: f64, v: &[f64], upper: f64, base: f64) -> Result<Vec<f64>> {
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            what: "perturbation direction",
            expected: d,
            got: v.len(),
        });
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::invalid(format!("perturbation radius must be positive, got {delta}")));
    }
    if !upper.is_finite() || !base.is_finite() {
        return Err(Error::NonFinite("estimator function values"));
    }
    check_finite("perturbation direction", v)?;
    let coeff = d as f64 / delta * (upper - base);
    Ok(v.iter().map(|vi| coeff * vi).collect())
}

/// `(d/δ)(f(x̂, y⁽ᴷ⁾(x̂)) − f(x, y⁽ᴷ⁾(x))) v`, built from the two leader losses
/// observed at the followers' `K`-step responses.
pub fn two_point_estimator(d: usize, delta: f64, v: &[f64], f_hat: f64, f_base: f64) -> Result<Vec<f64>> {
    scaled_difference(d, delta, v, f_hat, f_base)
}

/// `(d/δ)(f̃(x̂) − f̃(x)) v` with exact hyper-objective values.
pub fn oracle_estimator(
    d: usize,
    delta: f64,
    v: &[f64],
    ftilde_hat: f64,
    ftilde_base: f64,
) -> Result<Vec<f64>> {
    scaled_difference(d, delta, v, ftilde_hat, ftilde_base)
}

/// Sample mean of a vector quantity with per-coordinate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean over draws of the squared distance of each draw to the sample mean.
    pub mean_sq_deviation: f64,
    pub samples: usize,
}

/// Running per-coordinate mean and variance (Welford).
#[derive(Debug, Clone)]
pub(crate) struct VecAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VecAccumulator {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    pub(crate) fn push(&mut self, sample: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub(crate) fn finish(self) -> McEstimate {
        let n = self.n as f64;
        let std_err = self
            .m2
            .iter()
            .map(|s| if self.n > 1 { (s / (n - 1.0) / n).sqrt() } else { f64::INFINITY })
            .collect();
        let mean_sq_deviation = self.m2.iter().sum::<f64>() / n;
        McEstimate {
            mean: self.mean,
            std_err,
            mean_sq_deviation,
            samples: self.n,
        }
    }
}

/// Monte Carlo estimate of `E_v[F̃(x; δ, v)] = ∇f̃_δ(x)`, the gradient of the
/// ball-smoothed hyper-objective, from `n_samples` independent sphere draws.
pub fn smoothed_gradient_mc<F>(
    ftilde: F,
    x: &[f64],
    delta: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let d = x.len();
    let base = ftilde(x);
    let mut acc = VecAccumulator::new(d);
    let mut x_hat = vec![0.0; d];
    for _ in 0..n_samples {
        let v = rng.sample_unit_sphere(d)?;
        for ((xh, xi), vi) in x_hat.iter_mut().zip(x).zip(&v) {
            *xh = xi + delta * vi;
        }
        let est = oracle_estimator(d, delta, &v, ftilde(&x_hat), base)?;
        acc.push(&est);
    }
    Ok(acc.finish())
}
