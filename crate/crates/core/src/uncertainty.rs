//! Hyperbolic uncertainty: `u(x) = softplus(−‖x‖₂)`, its batch softmax, and
//! the entropy of that softmax.
//!
//! `x` is the space component of a point on the hyperboloid. Its Euclidean
//! norm is a monotone proxy for the hyperbolic radius `asinh(√κ‖x‖)/√κ`;
//! [`UncertaintySource::Radius`] uses the radius itself instead.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::manifold::{radius, Point};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintySource {
    /// Euclidean norm of the space component.
    #[default]
    Norm,
    /// Explicit hyperbolic radius.
    Radius,
}

impl std::str::FromStr for UncertaintySource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "norm" => Ok(Self::Norm),
            "radius" => Ok(Self::Radius),
            other => Err(format!("expected `norm` or `radius`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for UncertaintySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Norm => "norm",
            Self::Radius => "radius",
        })
    }
}

/// `softplus(−‖x‖₂)`, in `(0, ln 2]`.
pub fn uncertainty<S: Real>(x: &[S]) -> S {
    (-S::norm(x)).softplus()
}

pub fn point_uncertainty<S: Real>(p: &Point<S>, kappa: S, source: UncertaintySource) -> S {
    match source {
        UncertaintySource::Norm => uncertainty(&p.space),
        UncertaintySource::Radius => (-radius(&p.space, kappa)).softplus(),
    }
}

/// Log of the softmax weights, `u_i − logsumexp(u)`.
pub fn log_softmax<S: Real>(u: &[S]) -> Result<Vec<S>> {
    if u.is_empty() {
        return Err(contract("softmax of an empty vector"));
    }
    let lse = S::logsumexp(u);
    Ok(u.iter().map(|&x| x - lse).collect())
}

/// Entropy `−Σ w_i ln w_i` of `softmax(u)`, computed from the log-weights so
/// vanishing weights contribute exactly 0.
pub fn softmax_entropy<S: Real>(u: &[S]) -> Result<S> {
    let logw = log_softmax(u)?;
    let terms: Vec<S> = logw.iter().map(|&l| l.exp() * l).collect();
    Ok(-S::sum(&terms))
}

/// Per-element uncertainties of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVector(pub Vec<f64>);

/// Softmax-normalized uncertainty weights (sum to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedUncertainty(Vec<f64>);

impl NormalizedUncertainty {
    /// Accepts nonnegative weights summing to 1 within 1e-12.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(contract("normalized weights must be nonempty and nonnegative"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(contract(format!("weights sum to {s}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

pub fn normalize_uncertainty(u: &UncertaintyVector) -> Result<NormalizedUncertainty> {
    let logw = log_softmax(&u.0)?;
    Ok(NormalizedUncertainty(logw.into_iter().map(f64::exp).collect()))
}

pub fn entropy(w: &NormalizedUncertainty) -> f64 {
    -w.0
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}
