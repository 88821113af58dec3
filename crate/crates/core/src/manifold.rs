//! Lorentz-model geometry.
//!
//! Hyperbolic space of curvature `-κ` is the upper sheet
//! `{ x : ⟨x,x⟩_L = -1/κ, x_time > 0 }` with `⟨x,y⟩_L = -x_t y_t + ⟨x_s, y_s⟩`.
//! Every embedding is a space-only vector in the tangent space at the origin
//! `o = [1/√κ, 0]` and is lifted with the exponential map on demand.
//!
//! Two layers live here:
//!
//! * [`Manifold`] / [`LorentzPoint`]: the `f64` reference geometry. The time
//!   coordinate is carried with a double-double correction and inner products
//!   are compensated, so the hyperboloid constraint holds to ~1e-16 absolute
//!   even where `x_time²` is ~1e12.
//! * [`Point`] and the free generic functions: the same maps written against
//!   [`Real`], used by the losses and differentiated through the tape.

use serde::{Deserialize, Serialize};

use crate::error::{contract, numerical, Result};
use crate::scalar::Real;

pub const KAPPA_MIN: f64 = 0.1;
pub const KAPPA_MAX: f64 = 10.0;

/// How far an acosh/asin/acos argument may drift outside its domain before
/// it is treated as a bug rather than rounding.
pub const DOMAIN_BUDGET: f64 = 1e-6;

/// Curvature and dimension. Immutable; [`Manifold::with_kappa`] returns a new value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manifold {
    kappa: f64,
    dim: usize,
}

/// A space-only vector in the tangent space at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentEmbedding(Vec<f64>);

impl TangentEmbedding {
    pub fn new(space: Vec<f64>) -> Result<Self> {
        if space.iter().any(|x| !x.is_finite()) {
            return Err(contract("tangent embedding has non-finite entries"));
        }
        Ok(Self(space))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        euclid_norm(&self.0)
    }
}

/// A point on the hyperboloid.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    time: f64,
    // low-order part of the time coordinate: time + time_lo is the
    // double-double value of sqrt(|space|^2 + 1/κ)
    time_lo: f64,
    space: Vec<f64>,
}

impl LorentzPoint {
    /// Wraps raw `(time, space)` coordinates without checking the constraint.
    pub fn from_coords(time: f64, space: Vec<f64>) -> Self {
        Self {
            time,
            time_lo: 0.0,
            space,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    /// `(n+1)`-vector `[time, space...]` (time rounded to `f64`).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.space.len() + 1);
        v.push(self.time);
        v.extend_from_slice(&self.space);
        v
    }

    /// The same point as a generic [`Point`] (time rounded to `f64`).
    pub fn to_point(&self) -> Point<f64> {
        Point {
            time: self.time,
            space: self.space.clone(),
        }
    }
}

impl Manifold {
    /// Curvature is clamped into `[KAPPA_MIN, KAPPA_MAX]`.
    pub fn new(kappa: f64, dim: usize) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(contract(format!("curvature must be positive and finite, got {kappa}")));
        }
        if dim == 0 {
            return Err(contract("manifold dimension must be >= 1"));
        }
        Ok(Self {
            kappa: clamp_kappa(kappa),
            dim,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        Self::new(kappa, self.dim)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(contract(format!(
                "dimension mismatch: manifold has n={}, got {len}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn origin(&self) -> LorentzPoint {
        self.point_from_space(vec![0.0; self.dim])
            .expect("zero vector has the manifold dimension")
    }

    /// The hyperboloid point with the given space component; the time
    /// coordinate is solved from the constraint in double-double precision.
    pub fn point_from_space(&self, space: Vec<f64>) -> Result<LorentzPoint> {
        self.check_dim(space.len())?;
        let inv_k = 1.0 / self.kappa;
        let (sh, sl) = dd_sum_squares(&space);
        let (h, e) = two_sum(sh, inv_k);
        let (h, l) = fast_two_sum(h, sl + e);
        let t0 = h.sqrt();
        let resid = (-t0).mul_add(t0, h) + l;
        let (time, time_lo) = fast_two_sum(t0, resid / (2.0 * t0));
        Ok(LorentzPoint {
            time,
            time_lo,
            space,
        })
    }

    /// Exponential map at the origin.
    pub fn lift(&self, v: &TangentEmbedding) -> Result<LorentzPoint> {
        self.check_dim(v.0.len())?;
        let sk = self.kappa.sqrt();
        let f = crate::scalar::sinhc_f64(sk * v.norm());
        self.point_from_space(v.0.iter().map(|x| x * f).collect())
    }

    /// Logarithmic map at the origin; the origin maps to the zero vector.
    pub fn log_origin(&self, p: &LorentzPoint) -> Result<TangentEmbedding> {
        self.check_dim(p.dim())?;
        let r = euclid_norm(&p.space);
        if r == 0.0 {
            return Ok(TangentEmbedding::zeros(self.dim));
        }
        // acosh(√κ t) / sqrt(κ t² - 1) written with κ t² - 1 = κ |s|²; asinh keeps
        // full precision near the origin where acosh would lose half of it
        let sk = self.kappa.sqrt();
        let f = (sk * r).asinh() / (sk * r);
        Ok(TangentEmbedding(p.space.iter().map(|x| x * f).collect()))
    }

    /// Geodesic distance `acosh(-κ⟨p,q⟩_L) / √κ`.
    ///
    /// The acosh argument is checked against its domain (error when it falls
    /// below 1 by more than [`DOMAIN_BUDGET`]) and the value is evaluated in
    /// the equivalent chord form `2/√κ · asinh(√κ ‖p−q‖_L / 2)`, which is exact
    /// at `p = q` and keeps full precision for nearby points.
    pub fn distance(&self, p: &LorentzPoint, q: &LorentzPoint) -> Result<f64> {
        self.check_dim(p.dim())?;
        self.check_dim(q.dim())?;
        let dt_hi = p.time - q.time;
        let dt_lo = p.time_lo - q.time_lo;
        let mut terms = Vec::with_capacity(p.dim() + 3);
        let dt = dt_hi + dt_lo;
        let dt_err = (dt_hi - dt) + dt_lo;
        terms.push((-dt, dt));
        terms.push((-2.0 * dt, dt_err));
        for (a, b) in p.space.iter().zip(&q.space) {
            let d = a - b;
            terms.push((d, d));
        }
        let chord2 = dot2(terms.into_iter());
        let arg_minus_one = self.kappa * chord2 / 2.0;
        if arg_minus_one < -DOMAIN_BUDGET {
            return Err(numerical(format!(
                "acosh argument {} below 1 beyond budget",
                1.0 + arg_minus_one
            )));
        }
        let chord = chord2.max(0.0).sqrt();
        let sk = self.kappa.sqrt();
        Ok(2.0 / sk * (sk * chord / 2.0).asinh())
    }

    /// Geodesic distance from the origin of the point whose space component is
    /// `x`: `acosh(sqrt(1 + κ‖x‖²)) / √κ`, evaluated as `asinh(√κ‖x‖) / √κ`.
    pub fn hyperbolic_radius(&self, x: &[f64]) -> f64 {
        let sk = self.kappa.sqrt();
        (sk * euclid_norm(x)).asinh() / sk
    }
}

pub fn clamp_kappa(k: f64) -> f64 {
    k.clamp(KAPPA_MIN, KAPPA_MAX)
}

/// Lorentzian inner product of two points (compensated summation, including
/// the double-double time correction).
pub fn lorentz_inner(p: &LorentzPoint, q: &LorentzPoint) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(contract(format!(
            "lorentz_inner: dimension mismatch {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let head = [
        (-p.time, q.time),
        (-p.time, q.time_lo),
        (-p.time_lo, q.time),
    ];
    Ok(dot2(
        head.into_iter()
            .chain(p.space.iter().copied().zip(q.space.iter().copied())),
    ))
}

/// Lorentzian inner product of raw `(n+1)`-vectors `[time, space...]`.
pub fn lorentz_inner_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(contract(format!(
            "lorentz_inner: dimension mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(dot2(
        std::iter::once((-p[0], q[0])).chain(p[1..].iter().copied().zip(q[1..].iter().copied())),
    ))
}

pub(crate) fn euclid_norm(x: &[f64]) -> f64 {
    // scaled to avoid overflow for very large entries
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * x.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated dot product (Ogita–Rump–Oishi `Dot2`): as accurate as if
/// computed in twice the working precision, then rounded.
fn dot2(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (a, b) in pairs {
        let (p, ep) = two_prod(a, b);
        let (t, es) = two_sum(s, p);
        s = t;
        c += ep + es;
    }
    s + c
}

fn dd_sum_squares(x: &[f64]) -> (f64, f64) {
    let (mut s, mut c) = (0.0, 0.0);
    for &a in x {
        let (p, ep) = two_prod(a, a);
        let (t, es) = two_sum(s, p);
        s = t;
        c += ep + es;
    }
    fast_two_sum(s, c)
}

// ---------------------------------------------------------------------------
// Differentiable path

/// A hyperboloid point over a generic scalar.
#[derive(Debug, Clone)]
pub struct Point<S> {
    pub time: S,
    pub space: Vec<S>,
}

/// Exponential map at the origin: `space = sinh(√κ‖v‖)/(√κ‖v‖) · v`, time
/// solved from the constraint.
pub fn exp_origin<S: Real>(v: &[S], kappa: S) -> Point<S> {
    let sk = kappa.sqrt();
    let f = (sk * S::norm(v)).sinhc();
    let space: Vec<S> = v.iter().map(|&x| x * f).collect();
    point_from_space(space, kappa)
}

pub fn point_from_space<S: Real>(space: Vec<S>, kappa: S) -> Point<S> {
    let time = (S::dot(&space, &space) + kappa.recip()).sqrt();
    Point { time, space }
}

pub fn inner<S: Real>(p: &Point<S>, q: &Point<S>) -> S {
    S::dot(&p.space, &q.space) - p.time * q.time
}

/// `‖p − q‖²_L = -(p_t − q_t)² + ‖p_s − q_s‖²`, equal to `(2/κ)(−κ⟨p,q⟩_L − 1)`.
pub fn chord_sq<S: Real>(p: &Point<S>, q: &Point<S>) -> S {
    let dt = p.time - q.time;
    let diffs: Vec<S> = p.space.iter().zip(&q.space).map(|(&a, &b)| a - b).collect();
    S::dot(&diffs, &diffs) - dt * dt
}

/// `−κ⟨p,q⟩_L − 1`, computed without cancellation; checked against the
/// domain budget.
pub fn acosh_arg_minus_one<S: Real>(p: &Point<S>, q: &Point<S>, kappa: S) -> Result<S> {
    let a = kappa * chord_sq(p, q) * 0.5;
    let v = a.value();
    if v < -DOMAIN_BUDGET || !v.is_finite() {
        return Err(numerical(format!("acosh argument {} outside [1, inf)", 1.0 + v)));
    }
    Ok(a.clamp(0.0, f64::INFINITY))
}

/// Geodesic distance (chord form of `acosh(−κ⟨p,q⟩_L)/√κ`).
pub fn distance<S: Real>(p: &Point<S>, q: &Point<S>, kappa: S) -> Result<S> {
    let a = acosh_arg_minus_one(p, q, kappa)?;
    // acosh(1 + a) = 2 asinh(sqrt(a / 2))
    Ok((a * 0.5).sqrt().asinh() * 2.0 / kappa.sqrt())
}

/// Hyperbolic radius of the point with space component `x`.
pub fn radius<S: Real>(x: &[S], kappa: S) -> S {
    let sk = kappa.sqrt();
    (sk * S::norm(x)).asinh() / sk
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(kappa: f64, n: usize) -> Manifold {
        Manifold::new(kappa, n).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, max_norm: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = euclid_norm(&v);
        let target = rng.random_range(0.0..max_norm);
        v.iter().map(|x| x / r * target).collect()
    }

    #[test]
    fn origin_has_unit_negative_norm_at_unit_curvature() {
        let o = m(1.0, 3).origin();
        assert_eq!(o.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(lorentz_inner(&o, &o).unwrap(), -1.0);
    }

    #[test]
    fn raw_inner_expands_directly() {
        let s2 = 2f64.sqrt();
        let v = lorentz_inner_raw(&[s2, 1.0, 0.0], &[s2, 0.0, 1.0]).unwrap();
        assert!((v + 2.0).abs() < 1e-15);
        assert!(lorentz_inner_raw(&[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn raw_inner_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut oracle = -p[0] * q[0];
            for i in 1..5 {
                oracle += p[i] * q[i];
            }
            assert!((lorentz_inner_raw(&p, &q).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_of_zero_is_origin() {
        let mf = m(0.5, 4);
        let p = mf.lift(&TangentEmbedding::zeros(4)).unwrap();
        assert_eq!(p.time(), (1.0f64 / 0.5).sqrt());
        assert!(p.space().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lift_one_dim_closed_form() {
        let mf = m(1.0, 1);
        for &a in &[-2.0, -0.3, 0.7, 3.0] {
            let p = mf.lift(&TangentEmbedding::new(vec![a]).unwrap()).unwrap();
            assert!((p.time() - f64::cosh(a)).abs() < 1e-12 * f64::cosh(a));
            assert!((p.space()[0] - f64::sinh(a)).abs() < 1e-12 * f64::cosh(a));
            let back = mf.log_origin(&p).unwrap();
            assert!((back.as_slice()[0] - a).abs() < 1e-12);
            let o = mf.origin();
            assert!((mf.distance(&p, &o).unwrap() - a.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_origin_is_zero() {
        let mf = m(3.0, 2);
        assert_eq!(mf.log_origin(&mf.origin()).unwrap(), TangentEmbedding::zeros(2));
    }

    #[test]
    fn distance_to_self_is_zero() {
        let mf = m(10.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = mf
                .lift(&TangentEmbedding::new(rand_vec(&mut rng, 5, 5.0)).unwrap())
                .unwrap();
            assert_eq!(mf.distance(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn far_points_still_satisfy_constraint() {
        let mf = m(10.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = rand_vec(&mut rng, 8, 1.0);
        let r = euclid_norm(&v);
        v.iter_mut().for_each(|x| *x *= 5.0 / r);
        let p = mf.lift(&TangentEmbedding::new(v).unwrap()).unwrap();
        assert!(p.time() > 1e6);
        let c = lorentz_inner(&p, &p).unwrap() + 1.0 / mf.kappa();
        assert!(c.abs() < 1e-9, "constraint residual {c}");
    }

    #[test]
    fn radius_asymptotes() {
        let mf = m(1.0, 3);
        let small = mf.hyperbolic_radius(&[1e-3, 0.0, 0.0]);
        assert!(((small - 1e-3) / 1e-3).abs() < 1e-5);
        let big = mf.hyperbolic_radius(&[0.0, 1e3, 0.0]);
        assert!(((big - (2e3f64).ln()) / (2e3f64).ln()).abs() < 0.01);
        assert_eq!(mf.hyperbolic_radius(&[0.0; 3]), 0.0);
    }

    #[test]
    fn curvature_is_clamped() {
        assert_eq!(Manifold::new(50.0, 2).unwrap().kappa(), KAPPA_MAX);
        assert_eq!(Manifold::new(0.01, 2).unwrap().kappa(), KAPPA_MIN);
        assert!(Manifold::new(-1.0, 2).is_err());
        assert!(Manifold::new(1.0, 0).is_err());
    }

    #[test]
    fn distance_rejects_off_manifold_points() {
        let mf = m(1.0, 1);
        // both on the lower sheet relative to each other: clearly inconsistent
        let p = LorentzPoint::from_coords(1.0, vec![0.0]);
        let q = LorentzPoint::from_coords(-1.0, vec![0.0]);
        assert!(matches!(mf.distance(&p, &q), Err(crate::Error::Numerical(_))));
    }

    #[test]
    fn generic_path_agrees_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &k in &[0.1, 1.0, 10.0] {
            let mf = m(k, 6);
            for _ in 0..200 {
                let a = rand_vec(&mut rng, 6, 3.0);
                let b = rand_vec(&mut rng, 6, 3.0);
                let pa = exp_origin(&a, k);
                let pb = exp_origin(&b, k);
                let ra = mf.lift(&TangentEmbedding::new(a.clone()).unwrap()).unwrap();
                let rb = mf.lift(&TangentEmbedding::new(b.clone()).unwrap()).unwrap();
                let d_ref = mf.distance(&ra, &rb).unwrap();
                let d_gen = distance(&pa, &pb, k).unwrap();
                assert!((d_ref - d_gen).abs() < 1e-9 * d_ref.max(1.0));
                assert!((radius(&pa.space, k) - euclid_norm(&a)).abs() < 1e-9);
            }
        }
    }
}
