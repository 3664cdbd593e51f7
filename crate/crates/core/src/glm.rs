//! Link functions of the canonical exponential-family reward models.
//!
//! A [`LinkSpec`] carries the mean function `mu = g'`, its derivatives, the
//! constants `(L_mu, M_mu)`, and the reward sampler for the matching model:
//!
//! | kind     | mu(z)            | L_mu | M_mu |
//! |----------|------------------|------|------|
//! | linear   | z                | 1    | 0    |
//! | logistic | 1 / (1 + e^-z)   | 1/4  | 1    |
//! | poisson  | e^z              | e    | 1    |
//!
//! The Poisson Lipschitz constant `e` presumes logits restricted to
//! `[-1, 1]`; environments enforce that range by default.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("link evaluation overflowed at z = {0}")]
    Overflow(f64),
}

/// Largest `z` with finite `e^z`.
const EXP_MAX_ARG: f64 = 709.782_712_893_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Linear,
    Logistic,
    Poisson,
}

impl LinkKind {
    pub fn name(self) -> &'static str {
        match self {
            LinkKind::Linear => "linear",
            LinkKind::Logistic => "logistic",
            LinkKind::Poisson => "poisson",
        }
    }
}

impl std::fmt::Display for LinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A link function together with an optional floor on its derivative.
///
/// `derivative_floor = 0` (the default) keeps the exact derivative. A
/// positive floor clamps `mu_dot` from below, which the logistic experiment
/// presets use for numerical stability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    #[serde(default)]
    pub derivative_floor: f64,
}

impl LinkSpec {
    pub fn new(kind: LinkKind) -> Self {
        Self {
            kind,
            derivative_floor: 0.0,
        }
    }

    pub fn linear() -> Self {
        Self::new(LinkKind::Linear)
    }

    pub fn logistic() -> Self {
        Self::new(LinkKind::Logistic)
    }

    pub fn poisson() -> Self {
        Self::new(LinkKind::Poisson)
    }

    pub fn with_derivative_floor(mut self, floor: f64) -> Self {
        self.derivative_floor = floor;
        self
    }

    /// `L_mu`.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            LinkKind::Linear => 1.0,
            LinkKind::Logistic => 0.25,
            LinkKind::Poisson => std::f64::consts::E,
        }
    }

    /// `M_mu`, the self-concordance constant.
    pub fn self_concordance(&self) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.0,
            LinkKind::Logistic | LinkKind::Poisson => 1.0,
        }
    }

    /// `mu(z)`. Poisson overflow yields `+inf`; use [`LinkSpec::checked_mu`]
    /// to surface it as an error.
    pub fn mu(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => z,
            LinkKind::Logistic => sigmoid(z),
            LinkKind::Poisson => z.exp(),
        }
    }

    pub fn checked_mu(&self, z: f64) -> Result<f64, LinkError> {
        if self.kind == LinkKind::Poisson && z > EXP_MAX_ARG {
            return Err(LinkError::Overflow(z));
        }
        Ok(self.mu(z))
    }

    /// Exact `mu'(z)`, ignoring the floor.
    pub fn mu_dot_exact(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 1.0,
            LinkKind::Logistic => {
                let e = (-z.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            LinkKind::Poisson => z.exp(),
        }
    }

    /// `max(mu'(z), derivative_floor)`.
    pub fn mu_dot(&self, z: f64) -> f64 {
        let d = self.mu_dot_exact(z);
        if self.derivative_floor > 0.0 {
            d.max(self.derivative_floor)
        } else {
            d
        }
    }

    /// `Some(c)` when the floored derivative equals `c` everywhere: always for
    /// the linear link, and for the logistic link once the floor reaches its
    /// maximum derivative 1/4.
    pub fn constant_derivative(&self) -> Option<f64> {
        match self.kind {
            LinkKind::Linear => Some(self.derivative_floor.max(1.0)),
            LinkKind::Logistic if self.derivative_floor >= 0.25 => Some(self.derivative_floor),
            _ => None,
        }
    }

    /// Exact `mu''(z)`.
    pub fn mu_ddot(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.0,
            LinkKind::Logistic => self.mu_dot_exact(z) * (1.0 - 2.0 * sigmoid(z)),
            LinkKind::Poisson => z.exp(),
        }
    }

    /// The log-partition `g` with `g' = mu`: `z^2/2`, `log(1 + e^z)`, `e^z`.
    pub fn log_partition(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => 0.5 * z * z,
            LinkKind::Logistic => softplus(z),
            LinkKind::Poisson => z.exp(),
        }
    }

    pub(crate) fn checked_log_partition(&self, z: f64) -> Result<f64, LinkError> {
        if self.kind == LinkKind::Poisson && z > EXP_MAX_ARG {
            return Err(LinkError::Overflow(z));
        }
        Ok(self.log_partition(z))
    }

    /// `(a, b, mu(z), mu'(z))` with `g(z) = a + ln b`, using one exponential.
    /// `mu'` ignores the floor. Splitting off the log lets callers sum many
    /// `ln b` terms through a single logarithm of their product.
    pub(crate) fn eval(&self, z: f64) -> Result<(f64, f64, f64, f64), LinkError> {
        Ok(match self.kind {
            LinkKind::Linear => (0.5 * z * z, 1.0, z, 1.0),
            LinkKind::Logistic => {
                let e = (-z.abs()).exp();
                let inv = 1.0 / (1.0 + e);
                let mu = if z > 0.0 { inv } else { e * inv };
                (z.max(0.0), 1.0 + e, mu, e * inv * inv)
            }
            LinkKind::Poisson => {
                if z > EXP_MAX_ARG {
                    return Err(LinkError::Overflow(z));
                }
                let e = z.exp();
                (e, 1.0, e, e)
            }
        })
    }

    /// `sup |mu(z)|` over `|z| <= bound`.
    pub fn mean_bound(&self, bound: f64) -> f64 {
        match self.kind {
            LinkKind::Linear => bound,
            LinkKind::Logistic => 1.0,
            LinkKind::Poisson => bound.exp(),
        }
    }

    /// Draws a reward with mean `mu(z)`. `noise_sigma` is the Gaussian noise
    /// scale for the linear model and is ignored by the other kinds.
    pub fn sample_reward<R: Rng + ?Sized>(&self, z: f64, noise_sigma: f64, rng: &mut R) -> f64 {
        match self.kind {
            LinkKind::Linear => {
                let eps: f64 = StandardNormal.sample(rng);
                z + noise_sigma * eps
            }
            LinkKind::Logistic => {
                let u: f64 = rng.random();
                if u < sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }
            LinkKind::Poisson => {
                let rate = z.exp();
                match Poisson::new(rate) {
                    Ok(p) => p.sample(rng),
                    Err(_) => 0.0,
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
