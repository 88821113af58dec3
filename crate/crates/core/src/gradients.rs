//! Named parameter registry, tape-backed gradients, and a central
//! finite-difference checker.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::{with_kink_tracking, Real};
use crate::tape::{Tape, Var};

/// A dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "parameter data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Every learnable array, keyed by a unique name. Iteration order is the
/// name order, which fixes the order of every derived computation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, p: Param) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(contract(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name.to_string(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.data[0])
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.get_mut(name)?.data[0] = v;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

/// Read access to parameter values on some scalar type.
pub trait ParamSource<S> {
    fn values(&self, name: &str) -> Result<&[S]>;

    fn scalar_value(&self, name: &str) -> Result<S>
    where
        S: Copy,
    {
        Ok(self.values(name)?[0])
    }
}

impl ParamSource<f64> for ParameterStore {
    fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }
}

/// The store recorded as leaves of a tape.
pub struct TapeParams<'t> {
    vars: BTreeMap<String, Vec<Var<'t>>>,
}

impl<'t> TapeParams<'t> {
    pub fn record(tape: &'t Tape, store: &ParameterStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, p)| (name.to_string(), p.data.iter().map(|&x| tape.var(x)).collect()))
            .collect();
        Self { vars }
    }
}

impl<'t> ParamSource<Var<'t>> for TapeParams<'t> {
    fn values(&self, name: &str) -> Result<&[Var<'t>]> {
        self.vars
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))
    }
}

/// Gradient arrays keyed like the store.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Evaluates `f` on a fresh tape and returns its value, its gradient with
/// respect to every parameter, and whatever side result `f` produced.
pub fn value_and_grad<R>(
    store: &ParameterStore,
    f: impl for<'t> FnOnce(&TapeParams<'t>) -> Result<(Var<'t>, R)>,
) -> Result<(f64, GradMap, R)> {
    let tape = Tape::new();
    let tp = TapeParams::record(&tape, store);
    let (out, side) = f(&tp)?;
    let grads = tape.backward(out)?;
    let map = tp
        .vars
        .iter()
        .map(|(k, vs)| (k.clone(), vs.iter().map(|&v| grads.wrt(v)).collect()))
        .collect();
    Ok((Real::value(out), map, side))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub max_coords: usize,
    /// Coordinates whose evaluation comes within this distance of a kink are
    /// skipped.
    pub guard: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_coords: 200,
            guard: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f`, one report per
/// parameter in `names` (all parameters when empty). At most
/// `opts.max_coords` coordinates per parameter are sampled.
pub fn finite_diff_check(
    store: &ParameterStore,
    analytic: &GradMap,
    names: &[&str],
    f: impl Fn(&ParameterStore) -> Result<f64>,
    opts: &FdOptions,
) -> Result<Vec<ParamCheck>> {
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(contract(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.step)));
    }
    let selected: Vec<String> = if names.is_empty() {
        store.names().map(str::to_string).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut out = Vec::new();
    for name in selected {
        let len = store.get(&name)?.data.len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| contract(format!("no analytic gradient for `{name}`")))?;
        let mut coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.max_coords).into_vec()
        };
        coords.sort_unstable();
        let mut report = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: None,
            pass: true,
        };
        for i in coords {
            let x0 = store.get(&name)?.data[i];
            let mut eval = |x: f64| -> Result<(f64, f64)> {
                work.get_mut(&name)?.data[i] = x;
                let (v, margin) = with_kink_tracking(|| f(&work));
                Ok((v?, margin))
            };
            let plus = eval(x0 + opts.step);
            let minus = eval(x0 - opts.step);
            work.get_mut(&name)?.data[i] = x0;
            let ((fp, mp), (fm, mm)) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                // a perturbation that leaves the domain counts as a kink
                (Err(Error::Numerical(_)), _) | (_, Err(Error::Numerical(_))) => {
                    report.skipped += 1;
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            if mp.min(mm) < opts.guard {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(grad[i], numeric, opts.floor);
            report.checked += 1;
            if report.worst_index.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = Some(i);
            }
            if !(err < opts.tolerance) {
                report.pass = false;
            }
        }
        out.push(report);
    }
    Ok(out)
}
