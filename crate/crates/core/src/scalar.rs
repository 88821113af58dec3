//! The scalar vocabulary shared by plain `f64` evaluation and the gradient tape.
//!
//! Every differentiable routine in the crate is written once against
//! [`Real`]. Instantiated with `f64` it is a plain numeric evaluation (used by
//! the finite-difference oracle and evaluation code); instantiated with
//! [`crate::tape::Var`] it records a reverse-mode graph.
//!
//! Constants enter as `f64` operands on the right-hand side (`x * 2.0`,
//! `x + 1.0`), or through [`Real::constant_like`] when a fresh value is needed.

use std::cell::Cell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Floor applied under square roots of derivative formulas that blow up at a
/// kink (acosh at 1, asin/acos at ±1). Keeps `0 * inf` out of the backward pass.
pub(crate) const DERIV_FLOOR: f64 = 1e-30;

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living on the same graph as `self` (no gradient).
    fn constant_like(self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    fn cosh(self) -> Self;
    fn sinh(self) -> Self;
    fn asinh(self) -> Self;
    /// Caller guarantees the argument is >= 1 (clamp first).
    fn acosh(self) -> Self;
    /// Caller guarantees the argument is in [-1, 1].
    fn asin(self) -> Self;
    /// Caller guarantees the argument is in [-1, 1].
    fn acos(self) -> Self;
    /// `ln(1 + e^x)` in the overflow-free form.
    fn softplus(self) -> Self;
    /// `sinh(x) / x` with its analytic limit 1 at `x = 0`.
    fn sinhc(self) -> Self;
    /// `max(0, x)`; subgradient 0 at the boundary.
    fn relu(self) -> Self;
    /// Identity inside `[lo, hi]`, the nearest bound (gradient 0) outside.
    fn clamp(self, lo: f64, hi: f64) -> Self;
    /// Forward value only; blocks derivative flow.
    fn stop_gradient(self) -> Self;

    /// Sum of a non-empty slice.
    fn sum(xs: &[Self]) -> Self;
    /// Euclidean inner product of two non-empty equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self;
    /// Inner product with constant coefficients.
    fn dot_const(a: &[Self], c: &[f64]) -> Self;
    /// Euclidean norm of a non-empty slice; subgradient 0 at the zero vector.
    fn norm(xs: &[Self]) -> Self;
    /// `ln Σ exp(x_i)`, max-shifted.
    fn logsumexp(xs: &[Self]) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

// Distance-to-kink bookkeeping for the finite-difference harness. Only the
// f64 path records; the tape path never pays for it.
thread_local! {
    static KINK_MARGIN: Cell<Option<f64>> = const { Cell::new(None) };
}

#[inline]
fn note_kink(margin: f64) {
    KINK_MARGIN.with(|m| {
        if let Some(cur) = m.get() {
            m.set(Some(cur.min(margin)));
        }
    });
}

/// Runs `f` and reports the smallest distance to a non-differentiable point
/// (hinge at 0, clamp bounds, acosh at 1, asin/acos at ±1, norm at 0) touched
/// by any `f64` operation inside it.
pub fn with_kink_tracking<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let prev = KINK_MARGIN.with(|m| m.replace(Some(f64::INFINITY)));
    let out = f();
    let margin = KINK_MARGIN.with(|m| m.replace(prev)).unwrap_or(f64::INFINITY);
    if let Some(p) = prev {
        note_kink(p.min(margin));
    }
    (out, margin)
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sinhc_f64(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 + x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sinh() / x
    }
}

pub(crate) fn sinhc_deriv_f64(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x / 3.0 + x * x * x / 30.0
    } else {
        (x * x.cosh() - x.sinh()) / (x * x)
    }
}

pub(crate) fn logsumexp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn constant_like(self, c: f64) -> Self {
        c
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        note_kink(self.abs());
        f64::sqrt(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
    #[inline]
    fn sinh(self) -> Self {
        f64::sinh(self)
    }
    #[inline]
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    #[inline]
    fn acosh(self) -> Self {
        note_kink((self - 1.0).abs());
        f64::acosh(self)
    }
    #[inline]
    fn asin(self) -> Self {
        note_kink(1.0 - self.abs());
        f64::asin(self)
    }
    #[inline]
    fn acos(self) -> Self {
        note_kink(1.0 - self.abs());
        f64::acos(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn sinhc(self) -> Self {
        sinhc_f64(self)
    }
    #[inline]
    fn relu(self) -> Self {
        note_kink(self.abs());
        self.max(0.0)
    }
    #[inline]
    fn clamp(self, lo: f64, hi: f64) -> Self {
        let mut margin = f64::INFINITY;
        if lo.is_finite() {
            margin = margin.min((self - lo).abs());
        }
        if hi.is_finite() {
            margin = margin.min((self - hi).abs());
        }
        note_kink(margin);
        self.max(lo).min(hi)
    }
    #[inline]
    fn stop_gradient(self) -> Self {
        self
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn dot_const(a: &[Self], c: &[f64]) -> Self {
        Self::dot(a, c)
    }
    fn norm(xs: &[Self]) -> Self {
        let r = xs.iter().map(|x| x * x).sum::<f64>().sqrt();
        note_kink(r);
        r
    }
    fn logsumexp(xs: &[Self]) -> Self {
        logsumexp_f64(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus_f64(-1e6), 0.0);
        assert_eq!(softplus_f64(1e6), 1e6);
        assert!((softplus_f64(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sinhc_branches_meet() {
        for &x in &[9.9e-5, 1.0001e-4, -1.0001e-4] {
            let series = {
                let x2 = x * x;
                1.0 + x2 / 6.0 + x2 * x2 / 120.0
            };
            assert!((series - f64::sinh(x) / x).abs() < 1e-15);
        }
        assert_eq!(sinhc_f64(0.0), 1.0);
        assert_eq!(sinhc_deriv_f64(0.0), 0.0);
    }

    #[test]
    fn kink_tracking_reports_nearest_kink() {
        let (v, margin) = with_kink_tracking(|| Real::relu(0.3f64) + Real::acosh(1.0005f64));
        assert!(v > 0.3);
        assert!((margin - 5e-4).abs() < 1e-12);
        // outside tracking nothing is recorded
        let _ = (0.0f64).relu();
    }

    #[test]
    fn logsumexp_survives_large_logits() {
        let v = logsumexp_f64(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }
}
