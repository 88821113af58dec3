//! Entailment cones: aperture `ω(p)`, exterior angle `φ(p, q)` and membership.
//!
//! The cone at `p` opens away from the origin. `q` is entailed by `p` when the
//! angle at `p` between the outward radial geodesic and the geodesic to `q`
//! is at most `η·ω(p)`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, numerical, Result};
use crate::manifold::{Point, DOMAIN_BUDGET};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    /// Aperture constant `K`.
    pub k: f64,
    pub eta_inter: f64,
    pub eta_intra: f64,
}

impl Default for ConeParams {
    fn default() -> Self {
        Self {
            k: 0.1,
            eta_inter: 0.7,
            eta_intra: 1.2,
        }
    }
}

impl ConeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("K", self.k), ("eta_inter", self.eta_inter), ("eta_intra", self.eta_intra)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(contract(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Half-aperture `asin(min(1, 2K / (√κ ‖p_space‖)))`, in `(0, π/2]`.
pub fn aperture<S: Real>(p: &Point<S>, k: f64, kappa: S) -> Result<S> {
    let r = S::norm(&p.space);
    if r.value() == 0.0 {
        return Err(contract("aperture undefined at the origin (degenerate cone)"));
    }
    Ok(((r * kappa.sqrt()).recip() * (2.0 * k))
        .clamp(0.0, 1.0)
        .asin())
}

/// Exterior angle at `p`:
/// `acos((q_t + p_t κ⟨p,q⟩) / (‖p_s‖ √((κ⟨p,q⟩)² − 1)))`.
///
/// `(κ⟨p,q⟩)² − 1` is formed as `a(a + 2)` with `a = −κ⟨p,q⟩ − 1` taken from
/// [`separation`], so it stays accurate for nearby and for distant points.
pub fn exterior_angle<S: Real>(p: &Point<S>, q: &Point<S>, kappa: S) -> Result<S> {
    let pn = S::norm(&p.space);
    if pn.value() == 0.0 {
        return Err(contract("exterior angle undefined with the apex at the origin"));
    }
    let a = separation(p, q, pn, kappa)?;
    if a.value() == 0.0 {
        return Err(numerical("exterior angle undefined for q = p"));
    }
    let x = angle_cosine(p, q, pn, a, kappa);
    let xv = x.value();
    if !xv.is_finite() || xv.abs() > 1.0 + DOMAIN_BUDGET {
        return Err(numerical(format!("acos argument {xv} outside [-1, 1]")));
    }
    Ok(x.clamp(-1.0, 1.0).acos())
}

/// `a = −κ⟨p,q⟩_L − 1` from norms and directions only:
/// `(P−Q)²(1/κ + P² + Q²) / ((X + p_t q_t)(p_t q_t + PQ)) + κPQ‖p̂ − q̂‖²/2`
/// with `P, Q` the space norms and `X = 1/κ + P² + Q² − PQ`. Every term is
/// nonnegative, so nearly radial pairs far from the origin keep full
/// relative accuracy where the chord form does not.
fn separation<S: Real>(p: &Point<S>, q: &Point<S>, pn: S, kappa: S) -> Result<S> {
    let qn = S::norm(&q.space);
    let c = kappa.recip();
    let (p2, q2, pq) = (pn * pn, qn * qn, pn * qn);
    let tt = p.time * q.time;
    let x = c + p2 + q2 - pq;
    let gap = pn - qn;
    let mut a = gap * gap * (c + p2 + q2) / ((x + tt) * (tt + pq));
    if qn.value() > 0.0 {
        let dirs: Vec<S> = p
            .space
            .iter()
            .zip(&q.space)
            .map(|(&ps, &qs)| ps / pn - qs / qn)
            .collect();
        a = a + kappa * pq * S::dot(&dirs, &dirs) * 0.5;
    }
    if !a.value().is_finite() {
        return Err(numerical("non-finite Lorentz separation"));
    }
    Ok(a)
}

/// `(q_t − p_t(1 + a)) / (‖p_s‖ √(a(a+2)))`.
///
/// Far from the origin the numerator is a difference of two huge, nearly
/// equal terms. With `A = p̂·q_s` and `q_⊥ = q_s − A p̂` it equals
/// `κ‖p_s‖ N / D`, `N = (A − ‖p_s‖)(A + ‖p_s‖)/κ − ‖q_⊥‖²‖p_s‖²`,
/// `D = p_t A + q_t ‖p_s‖`, which has no cancellation when `A > 0`.
fn angle_cosine<S: Real>(p: &Point<S>, q: &Point<S>, pn: S, a: S, kappa: S) -> S {
    let root = (a * (a + 2.0)).sqrt();
    let along = S::dot(&p.space, &q.space) / pn;
    if along.value() <= 0.0 {
        return (q.time - p.time * (a + 1.0)) / (pn * root);
    }
    let perp: Vec<S> = p
        .space
        .iter()
        .zip(&q.space)
        .map(|(&ps, &qs)| qs - ps / pn * along)
        .collect();
    let n = (along - pn) * (along + pn) / kappa - S::dot(&perp, &perp) * pn * pn;
    let d = p.time * along + q.time * pn;
    kappa * n / (d * root)
}

/// Boundary-inclusive: `φ(p,q) ≤ η·ω(p)`.
pub fn in_cone<S: Real>(p: &Point<S>, q: &Point<S>, k: f64, eta: f64, kappa: S) -> Result<bool> {
    let phi = exterior_angle(p, q, kappa)?;
    let omega = aperture(p, k, kappa)?;
    Ok(phi.value() <= eta * omega.value())
}
