//! Step-size and perturbation schedules, rate certificates, and the
//! inner-iteration budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the decaying schedules
/// `η_t = η̄ (t+1)^{-1/2} d^{-1}` and `δ_t = δ̄ (t+1)^{-1/4} d^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eta_bar: f64,
    pub delta_bar: f64,
    pub d: usize,
}

impl ScheduleParams {
    pub fn new(eta_bar: f64, delta_bar: f64, d: usize) -> Result<Self> {
        let params = Self {
            eta_bar,
            delta_bar,
            d,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_bar.is_finite() && self.eta_bar > 0.0) {
            return Err(Error::invalid(format!("eta_bar must be positive, got {}", self.eta_bar)));
        }
        if !(self.delta_bar.is_finite() && self.delta_bar > 0.0) {
            return Err(Error::invalid(format!(
                "delta_bar must be positive, got {}",
                self.delta_bar
            )));
        }
        if self.d == 0 {
            return Err(Error::invalid("schedule dimension must be positive"));
        }
        Ok(())
    }

    /// Leader step size at round `t`.
    pub fn eta(&self, t: usize) -> f64 {
        self.eta_bar / ((t as f64 + 1.0).sqrt() * self.d as f64)
    }

    /// Perturbation radius at round `t`.
    pub fn delta(&self, t: usize) -> f64 {
        self.delta_bar / ((t as f64 + 1.0).powf(0.25) * (self.d as f64).sqrt())
    }

    /// Largest admissible `η̄` for a hyper-objective with smoothness `ell`: `d / (2ℓ)`.
    pub fn max_eta_bar(d: usize, ell: f64) -> f64 {
        d as f64 / (2.0 * ell)
    }

    /// Checks `η̄ ≤ d/(2ℓ_f̃)`. Returns a warning string when `ℓ_f̃` is unknown and the
    /// condition cannot be verified.
    pub fn check_step_bound(&self, ell_ftilde: Option<f64>) -> Result<Option<String>> {
        match ell_ftilde {
            Some(ell) if ell > 0.0 => {
                let bound = Self::max_eta_bar(self.d, ell);
                if self.eta_bar > bound {
                    Err(Error::invalid(format!(
                        "eta_bar = {} exceeds d/(2*ell_ftilde) = {bound}",
                        self.eta_bar
                    )))
                } else {
                    Ok(None)
                }
            }
            Some(_) => Ok(None),
            None => Ok(Some(format!(
                "eta_bar = {} not verified against d/(2*ell_ftilde): smoothness constant unknown",
                self.eta_bar
            ))),
        }
    }
}

/// Convergence certificate of the followers' update rule.
///
/// `alpha(K)` bounds the factor by which `K` inner steps shrink the *squared*
/// distance to equilibrium. For the exponential kind `rho` is therefore the
/// per-step contraction of the squared distance; for a rule contracting the
/// distance itself by `q` per step, `rho = q²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateCertificate {
    /// `‖y⁽ᴷ⁾ − S‖² ≤ C K^{-λ} ‖y⁽⁰⁾ − S‖²`
    Polynomial { c: f64, lambda: f64 },
    /// `‖y⁽ᴷ⁾ − S‖² ≤ C ρ^K ‖y⁽⁰⁾ − S‖²`
    Exponential { c: f64, rho: f64 },
}

impl RateCertificate {
    pub fn polynomial(c: f64, lambda: f64) -> Result<Self> {
        let cert = RateCertificate::Polynomial { c, lambda };
        cert.validate()?;
        Ok(cert)
    }

    pub fn exponential(c: f64, rho: f64) -> Result<Self> {
        let cert = RateCertificate::Exponential { c, rho };
        cert.validate()?;
        Ok(cert)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RateCertificate::Polynomial { c, lambda } => {
                if !(c.is_finite() && c > 0.0) {
                    return Err(Error::invalid(format!("certificate C must be positive, got {c}")));
                }
                if !(lambda.is_finite() && lambda > 0.0) {
                    return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
                }
            }
            RateCertificate::Exponential { c, rho } => {
                if !(c.is_finite() && c > 0.0) {
                    return Err(Error::invalid(format!("certificate C must be positive, got {c}")));
                }
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")));
                }
            }
        }
        Ok(())
    }

    /// `α(K)`: `C K^{-λ}` (polynomial) or `ρ^K` (exponential; `C` is absorbed).
    pub fn alpha(&self, k: usize) -> f64 {
        let k = k.max(1);
        match *self {
            RateCertificate::Polynomial { c, lambda } => c * (k as f64).powf(-lambda),
            RateCertificate::Exponential { rho, .. } => rho.powi(k as i32),
        }
    }

    /// Smallest `K` meeting the inner-iteration threshold for horizon `T` and
    /// leader dimension `d`:
    ///
    /// - polynomial: `K ≥ T^{1/(2λ)} d^{2/λ}`
    /// - exponential: `K ≥ (½ ln T + 2 ln d) / |ln ρ|`
    pub fn choose_inner_iterations(&self, horizon: usize, d: usize) -> Result<usize> {
        self.validate()?;
        if horizon == 0 || d == 0 {
            return Err(Error::invalid("horizon and dimension must be positive"));
        }
        let t = horizon as f64;
        let d = d as f64;
        let threshold = match *self {
            RateCertificate::Polynomial { lambda, .. } => {
                t.powf(1.0 / (2.0 * lambda)) * d.powf(2.0 / lambda)
            }
            RateCertificate::Exponential { rho, .. } => {
                (0.5 * t.ln() + 2.0 * d.ln()) / rho.ln().abs()
            }
        };
        // Thresholds that are integers in exact arithmetic (e.g. powers of ρ = ½)
        // may land one rounding error above the integer.
        let k = (threshold - 1e-9 * threshold.max(1.0)).ceil();
        Ok((k as usize).max(1))
    }
}
