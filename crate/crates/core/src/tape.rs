//! Reverse-mode gradient tape over the [`Real`] vocabulary.
//!
//! Each node stores its forward value and the local partial derivatives with
//! respect to its parents, so the backward pass is a single reverse sweep of
//! multiply-accumulates. Fused reductions (`dot`, `norm`, `logsumexp`, ...)
//! are one node with many parents.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{numerical, Result};
use crate::scalar::{self, Real, DERIV_FLOOR};

#[derive(Default)]
struct Inner {
    values: Vec<f64>,
    ops: Vec<&'static str>,
    // parents of node i live in parents[starts[i]..starts[i + 1]]
    starts: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl Inner {
    fn clear(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.starts.clear();
        self.parents.clear();
        self.partials.clear();
    }
}

thread_local! {
    // buffers of dropped tapes; training builds one large tape per step
    static POOL: RefCell<Vec<Inner>> = const { RefCell::new(Vec::new()) };
}

pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        let inner = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
        Self {
            inner: RefCell::new(inner),
        }
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        let mut inner = std::mem::take(self.inner.get_mut());
        inner.clear();
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < 4 {
                p.push(inner);
            }
        });
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.val)
    }
}

/// Adjoints of every node after a backward sweep.
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints[v.idx as usize]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push("leaf", value, std::iter::empty())
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push("const", value, std::iter::empty())
    }

    fn push(
        &self,
        op: &'static str,
        value: f64,
        parents: impl IntoIterator<Item = (u32, f64)>,
    ) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let idx = g.values.len() as u32;
        let start = g.parents.len() as u32;
        g.starts.push(start);
        for (p, d) in parents {
            g.parents.push(p);
            g.partials.push(d);
        }
        g.values.push(value);
        g.ops.push(op);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    /// Reverse sweep from `output`. Nodes recorded after `output` are ignored.
    ///
    /// Fails if any adjoint on the path becomes NaN or infinite; the error
    /// names the most downstream offending node.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, output.tape), "output belongs to another tape");
        let g = self.inner.borrow();
        let n = g.values.len();
        let mut adj = vec![0.0f64; n];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            if !a.is_finite() {
                return Err(numerical(format!(
                    "non-finite gradient {a} at node #{i} ({}), value {}",
                    g.ops[i], g.values[i]
                )));
            }
            let lo = g.starts[i] as usize;
            let hi = if i + 1 < n {
                g.starts[i + 1] as usize
            } else {
                g.parents.len()
            };
            for k in lo..hi {
                adj[g.parents[k] as usize] += a * g.partials[k];
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: &'static str, value: f64, d: f64) -> Self {
        self.tape.push(op, value, [(self.idx, d)])
    }

    fn binary(self, other: Self, op: &'static str, value: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        self.tape.push(op, value, [(self.idx, da), (other.idx, db)])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, "add", self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, "sub", self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, "mul", self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, "div", q, 1.0 / o.val, -q / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary("neg", -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary("add_c", self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary("sub_c", self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary("mul_c", self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary("div_c", self.val / c, 1.0 / c)
    }
}

fn tape_of<'t>(xs: &[Var<'t>]) -> &'t Tape {
    xs.first().expect("reduction over an empty slice").tape
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }

    fn constant_like(self, c: f64) -> Self {
        self.tape.constant(c)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary("exp", e, e)
    }

    fn ln(self) -> Self {
        self.unary("ln", self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.unary("sqrt", s, d)
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.val;
        self.unary("recip", r, -r * r)
    }

    fn cosh(self) -> Self {
        self.unary("cosh", self.val.cosh(), self.val.sinh())
    }

    fn sinh(self) -> Self {
        self.unary("sinh", self.val.sinh(), self.val.cosh())
    }

    fn asinh(self) -> Self {
        let x = self.val;
        self.unary("asinh", x.asinh(), 1.0 / (1.0 + x * x).sqrt())
    }

    fn acosh(self) -> Self {
        let x = self.val;
        self.unary("acosh", x.acosh(), 1.0 / (x * x - 1.0).max(DERIV_FLOOR).sqrt())
    }

    fn asin(self) -> Self {
        let x = self.val;
        self.unary("asin", x.asin(), 1.0 / (1.0 - x * x).max(DERIV_FLOOR).sqrt())
    }

    fn acos(self) -> Self {
        let x = self.val;
        self.unary("acos", x.acos(), -1.0 / (1.0 - x * x).max(DERIV_FLOOR).sqrt())
    }

    fn softplus(self) -> Self {
        let x = self.val;
        self.unary("softplus", scalar::softplus_f64(x), scalar::sigmoid_f64(x))
    }

    fn sinhc(self) -> Self {
        let x = self.val;
        self.unary("sinhc", scalar::sinhc_f64(x), scalar::sinhc_deriv_f64(x))
    }

    fn relu(self) -> Self {
        let x = self.val;
        self.unary("relu", x.max(0.0), if x > 0.0 { 1.0 } else { 0.0 })
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let x = self.val;
        if x < lo {
            self.tape.push("clamp", lo, std::iter::empty())
        } else if x > hi {
            self.tape.push("clamp", hi, std::iter::empty())
        } else {
            self.unary("clamp", x, 1.0)
        }
    }

    fn stop_gradient(self) -> Self {
        self.tape.push("stop_gradient", self.val, std::iter::empty())
    }

    fn sum(xs: &[Self]) -> Self {
        let tape = tape_of(xs);
        let v = xs.iter().map(|x| x.val).sum();
        tape.push("sum", v, xs.iter().map(|x| (x.idx, 1.0)))
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let tape = tape_of(a);
        let v = a.iter().zip(b).map(|(x, y)| x.val * y.val).sum();
        tape.push(
            "dot",
            v,
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| [(x.idx, y.val), (y.idx, x.val)]),
        )
    }

    fn dot_const(a: &[Self], c: &[f64]) -> Self {
        assert_eq!(a.len(), c.len(), "dot_const: length mismatch");
        let tape = tape_of(a);
        let v = a.iter().zip(c).map(|(x, k)| x.val * k).sum();
        tape.push("dot_const", v, a.iter().zip(c).map(|(x, &k)| (x.idx, k)))
    }

    fn norm(xs: &[Self]) -> Self {
        let tape = tape_of(xs);
        let r = xs.iter().map(|x| x.val * x.val).sum::<f64>().sqrt();
        let inv = if r > 0.0 { 1.0 / r } else { 0.0 };
        tape.push("norm", r, xs.iter().map(|x| (x.idx, x.val * inv)))
    }

    fn logsumexp(xs: &[Self]) -> Self {
        let tape = tape_of(xs);
        let vals: Vec<f64> = xs.iter().map(|x| x.val).collect();
        let lse = scalar::logsumexp_f64(&vals);
        tape.push(
            "logsumexp",
            lse,
            xs.iter().map(|x| (x.idx, (x.val - lse).exp())),
        )
    }
}
