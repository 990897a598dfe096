//! Pinball loss, its β-robust counterpart, and the L1 proximal operator.
//!
//! Residuals are always `r = y - f(x)`.
//!
//! The β-robust loss comes from replacing the KL divergence behind the
//! asymmetric-Laplace likelihood with the density-power divergence. With the
//! scale fixed the integral term is constant, and per sample the loss is
//!
//! ```text
//! ℓ_β(r) = (1 - exp(-β ρ_α(r/σ))) / β
//! ```
//!
//! It is often printed as `(exp(-β ρ) - 1) / β`; that expression decreases in
//! `ρ` and is minimised by sending residuals to infinity, so the sign is
//! flipped here. `ℓ_β` is increasing, bounded by `1/β`, and tends to
//! `ρ_α(r/σ)` as `β → 0⁺`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A quantile level strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::Config(format!(
                "quantile level must lie in (0, 1), got {alpha}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;

    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

impl std::fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    pub beta: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

impl BetaConfig {
    pub fn new(beta: f64, sigma: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { beta, sigma })
    }

    pub fn with_beta(beta: f64) -> Result<Self> {
        Self::new(beta, 1.0)
    }
}

/// Check function `ρ_α(r)`.
#[inline]
pub fn pinball(residual: f64, alpha: QuantileLevel) -> f64 {
    if residual >= 0.0 {
        residual * alpha.0
    } else {
        -residual * (1.0 - alpha.0)
    }
}

/// Subgradient of [`pinball`]; `r = 0` takes the `r ≥ 0` branch.
#[inline]
pub fn pinball_dr(residual: f64, alpha: QuantileLevel) -> f64 {
    if residual >= 0.0 {
        alpha.0
    } else {
        alpha.0 - 1.0
    }
}

#[inline]
pub fn beta_pinball(residual: f64, alpha: QuantileLevel, cfg: BetaConfig) -> f64 {
    let rho = pinball(residual / cfg.sigma, alpha);
    // -expm1(-z) keeps full precision for tiny β·ρ
    -(-cfg.beta * rho).exp_m1() / cfg.beta
}

#[inline]
pub fn beta_pinball_dr(residual: f64, alpha: QuantileLevel, cfg: BetaConfig) -> f64 {
    let scaled = residual / cfg.sigma;
    let weight = (-cfg.beta * pinball(scaled, alpha)).exp();
    weight * pinball_dr(scaled, alpha) / cfg.sigma
}

/// Proximal operator of `λ|·|`.
pub fn soft_threshold(x: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "soft-threshold level must be non-negative, got {lambda}"
        )));
    }
    Ok(shrink(x, lambda))
}

#[inline]
pub(crate) fn shrink(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}
