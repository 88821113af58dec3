//! Training objectives: the uncertainty-guided contrastive loss, the leaky
//! entailment loss, uncertainty calibration, and their weighted total.
//!
//! All losses are generic over [`Real`] so the same code evaluates plain
//! values and records tape gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::entailment::{aperture, exterior_angle, ConeParams};
use crate::error::{contract, numerical, Result};
use crate::manifold::{distance, exp_origin, Point};
use crate::scalar::Real;
use crate::uncertainty::{point_uncertainty, softmax_entropy, UncertaintySource};

pub const TEMPERATURE_MIN: f64 = 0.01;

/// Tangent-space embeddings for one step. Row `i` of the part sets belongs
/// to whole `part_of[i]`.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub whole_image: Vec<Vec<S>>,
    pub whole_text: Vec<Vec<S>>,
    pub part_image: Vec<Vec<S>>,
    pub part_text: Vec<Vec<S>>,
    pub part_of: Vec<usize>,
}

impl<S: Real> Batch<S> {
    /// Aligned batch with the identity part→whole map.
    pub fn aligned(
        whole_image: Vec<Vec<S>>,
        whole_text: Vec<Vec<S>>,
        part_image: Vec<Vec<S>>,
        part_text: Vec<Vec<S>>,
    ) -> Self {
        let b = whole_image.len();
        Self {
            whole_image,
            whole_text,
            part_image,
            part_text,
            part_of: (0..b).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.whole_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.whole_image.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.whole_image.len();
        if b < 2 {
            return Err(contract(format!("batch size must be >= 2, got {b}")));
        }
        for (name, set) in [
            ("whole_text", &self.whole_text),
            ("part_image", &self.part_image),
            ("part_text", &self.part_text),
        ] {
            if set.len() != b {
                return Err(contract(format!("{name} has {} rows, expected {b}", set.len())));
            }
        }
        if self.part_of.len() != b {
            return Err(contract("part_of must have one entry per part"));
        }
        let mut seen = vec![false; b];
        for &w in &self.part_of {
            if w >= b || seen[w] {
                return Err(contract("part_of must map parts onto distinct wholes in [0, B)"));
            }
            seen[w] = true;
        }
        let n = self.whole_image[0].len();
        if n == 0 {
            return Err(contract("embedding dimension must be >= 1"));
        }
        let all = [&self.whole_image, &self.whole_text, &self.part_image, &self.part_text];
        if all.iter().any(|set| set.iter().any(|row| row.len() != n)) {
            return Err(contract("all embeddings must share one dimension"));
        }
        Ok(())
    }

    /// Applies one row permutation to all four sets (and re-indexes `part_of`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let pick = |set: &Vec<Vec<S>>| perm.iter().map(|&i| set[i].clone()).collect();
        Self {
            whole_image: pick(&self.whole_image),
            whole_text: pick(&self.whole_text),
            part_image: pick(&self.part_image),
            part_text: pick(&self.part_text),
            part_of: perm.iter().map(|&i| inv[self.part_of[i]]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSet<S = f64> {
    pub global: S,
    pub local: S,
    pub global_local: S,
}

impl Default for TemperatureSet<f64> {
    fn default() -> Self {
        Self {
            global: 0.07,
            local: 0.07,
            global_local: 0.06,
        }
    }
}

impl TemperatureSet<f64> {
    /// Projects every temperature onto `[TEMPERATURE_MIN, ∞)`.
    pub fn clamped(self) -> Self {
        Self {
            global: self.global.max(TEMPERATURE_MIN),
            local: self.local.max(TEMPERATURE_MIN),
            global_local: self.global_local.max(TEMPERATURE_MIN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Initial temperatures (the live values are learnable parameters).
    pub temps: TemperatureSet,
    pub cone: ConeParams,
    /// Leak on the exterior angle in the relaxed entailment loss.
    pub alpha: f64,
    /// Weight of the intra-modal entailment terms.
    pub lambda_intra: f64,
    /// Weight of the calibration terms.
    pub lambda_cal: f64,
    /// Weight of the whole entailment objective in the total.
    pub lambda_ent: f64,
    /// +1 adds the softmax entropy to the calibration loss, -1 subtracts it.
    pub entropy_sign: f64,
    /// Include the positive pair in the contrastive denominator.
    pub include_positive: bool,
    pub uncertainty_source: UncertaintySource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temps: TemperatureSet::default(),
            cone: ConeParams::default(),
            alpha: 0.1,
            lambda_intra: 0.5,
            lambda_cal: 10.0,
            lambda_ent: 0.2,
            entropy_sign: 1.0,
            include_positive: false,
            uncertainty_source: UncertaintySource::Norm,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.cone.validate()?;
        if self.entropy_sign != 1.0 && self.entropy_sign != -1.0 {
            return Err(contract("entropy_sign must be +1 or -1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(contract("alpha must be >= 0"));
        }
        for (name, v) in [
            ("lambda_intra", self.lambda_intra),
            ("lambda_cal", self.lambda_cal),
            ("lambda_ent", self.lambda_ent),
        ] {
            if !v.is_finite() {
                return Err(contract(format!("{name} must be finite")));
            }
        }
        let t = self.temps;
        if [t.global, t.local, t.global_local].iter().any(|&x| !(x >= TEMPERATURE_MIN)) {
            return Err(contract(format!("temperatures must be >= {TEMPERATURE_MIN}")));
        }
        Ok(())
    }
}

/// Component values of one loss evaluation (unweighted sums).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

pub const COMPONENTS: [&str; 6] = [
    "contrastive_global",
    "contrastive_local",
    "contrastive_globallocal",
    "entail_inter",
    "entail_intra",
    "calibration",
];

impl LossReport {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(f64::NAN)
    }

    /// The weighted total rebuilt from the components.
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        let c = |n| self.component(n);
        let contrastive =
            c("contrastive_globallocal") + c("contrastive_global") + c("contrastive_local");
        let entail = c("entail_inter")
            + cfg.lambda_intra * c("entail_intra")
            + cfg.lambda_cal * c("calibration");
        contrastive + cfg.lambda_ent * entail
    }
}

/// Loss terms on the scalar type they were computed in.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<S> {
    pub global: S,
    pub local: S,
    pub global_local: S,
    pub inter: S,
    pub intra: S,
    pub calibration: S,
    pub contrastive: S,
    pub entailment: S,
    pub total: S,
}

impl<S: Real> LossTerms<S> {
    pub fn report(&self) -> LossReport {
        let components = [
            ("contrastive_global", self.global),
            ("contrastive_local", self.local),
            ("contrastive_globallocal", self.global_local),
            ("entail_inter", self.inter),
            ("entail_intra", self.intra),
            ("calibration", self.calibration),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.value()))
        .collect();
        LossReport {
            total: self.total.value(),
            components,
        }
    }
}

/// The batch lifted onto the hyperboloid, with wholes re-ordered to line up
/// with parts.
pub struct LiftedBatch<S> {
    pub whole_image: Vec<Point<S>>,
    pub whole_text: Vec<Point<S>>,
    pub part_image: Vec<Point<S>>,
    pub part_text: Vec<Point<S>>,
    pub whole_image_of_part: Vec<Point<S>>,
    pub whole_text_of_part: Vec<Point<S>>,
}

impl<S: Real> LiftedBatch<S> {
    pub fn new(b: &Batch<S>, kappa: S) -> Result<Self> {
        b.validate()?;
        let lift = |set: &Vec<Vec<S>>| -> Vec<Point<S>> {
            set.iter().map(|v| exp_origin(v, kappa)).collect()
        };
        let whole_image = lift(&b.whole_image);
        let whole_text = lift(&b.whole_text);
        let whole_image_of_part = b.part_of.iter().map(|&w| whole_image[w].clone()).collect();
        let whole_text_of_part = b.part_of.iter().map(|&w| whole_text[w].clone()).collect();
        Ok(Self {
            part_image: lift(&b.part_image),
            part_text: lift(&b.part_text),
            whole_image,
            whole_text,
            whole_image_of_part,
            whole_text_of_part,
        })
    }
}

/// Temperature applied to each anchor row.
#[derive(Debug, Clone, Copy)]
pub enum Temperature<'a, S> {
    Shared(S),
    PerRow(&'a [S]),
}

impl<S: Copy> Temperature<'_, S> {
    fn row(&self, i: usize) -> S {
        match self {
            Temperature::Shared(t) => *t,
            Temperature::PerRow(ts) => ts[i],
        }
    }
}

/// `D[i][k] = d(a_i, b_k)`.
pub fn distance_matrix<S: Real>(a: &[Point<S>], b: &[Point<S>], kappa: S) -> Result<Vec<Vec<S>>> {
    a.iter()
        .map(|p| b.iter().map(|q| distance(p, q, kappa)).collect())
        .collect()
}

/// Contrastive loss from a precomputed distance matrix. With `transpose`,
/// rows of `dist` are targets and columns anchors.
pub fn contrastive_from_distances<S: Real>(
    dist: &[Vec<S>],
    transpose: bool,
    tau: Temperature<'_, S>,
    include_positive: bool,
) -> Result<S> {
    let b = dist.len();
    if b < 2 {
        return Err(contract("contrastive loss needs B >= 2 (empty denominator)"));
    }
    if let Temperature::PerRow(ts) = tau {
        if ts.len() != b {
            return Err(contract("per-row temperatures must match the batch size"));
        }
    }
    let d = |i: usize, k: usize| if transpose { dist[k][i] } else { dist[i][k] };
    let mut rows = Vec::with_capacity(b);
    let mut denom = Vec::with_capacity(b);
    for i in 0..b {
        let t = tau.row(i);
        let pos = -(d(i, i) / t);
        denom.clear();
        for k in 0..b {
            if k != i || include_positive {
                denom.push(-(d(i, k) / t));
            }
        }
        let term = S::logsumexp(&denom) - pos;
        if !term.value().is_finite() {
            return Err(numerical(format!("non-finite contrastive term at row {i}")));
        }
        rows.push(term);
    }
    Ok(S::sum(&rows))
}

/// `−Σ_i log[ exp(−d(a_i,t_i)/τ_i) / Σ_{k≠i} exp(−d(a_i,t_k)/τ_i) ]`.
pub fn contrastive<S: Real>(
    anchors: &[Point<S>],
    targets: &[Point<S>],
    tau: Temperature<'_, S>,
    kappa: S,
    include_positive: bool,
) -> Result<S> {
    if anchors.len() != targets.len() {
        return Err(contract("anchors and targets must have equal batch length"));
    }
    let dist = distance_matrix(anchors, targets, kappa)?;
    contrastive_from_distances(&dist, false, tau, include_positive)
}

/// `τ_i = exp(u(part_i)/2)·τ_gl`, within `[τ_gl, √2·τ_gl]`.
pub fn adaptive_temperatures<S: Real>(
    parts: &[Point<S>],
    tau_gl: S,
    kappa: S,
    source: UncertaintySource,
) -> Vec<S> {
    parts
        .iter()
        .map(|p| (point_uncertainty(p, kappa, source) * 0.5).exp() * tau_gl)
        .collect()
}

/// The three contrastive pairs: (global-local, global, local).
pub fn contrastive_terms<S: Real>(
    lb: &LiftedBatch<S>,
    temps: &TemperatureSet<S>,
    kappa: S,
    cfg: &LossConfig,
) -> Result<(S, S, S)> {
    let src = cfg.uncertainty_source;
    let incl = cfg.include_positive;
    let tau_img = adaptive_temperatures(&lb.part_image, temps.global_local, kappa, src);
    let tau_txt = adaptive_temperatures(&lb.part_text, temps.global_local, kappa, src);

    let d_pi_t = distance_matrix(&lb.part_image, &lb.whole_text_of_part, kappa)?;
    let d_pt_i = distance_matrix(&lb.part_text, &lb.whole_image_of_part, kappa)?;
    let global_local = contrastive_from_distances(&d_pi_t, false, Temperature::PerRow(&tau_img), incl)?
        + contrastive_from_distances(&d_pt_i, false, Temperature::PerRow(&tau_txt), incl)?;

    let d_i_t = distance_matrix(&lb.whole_image, &lb.whole_text, kappa)?;
    let global = contrastive_from_distances(&d_i_t, false, Temperature::Shared(temps.global), incl)?
        + contrastive_from_distances(&d_i_t, true, Temperature::Shared(temps.global), incl)?;

    let d_pi_pt = distance_matrix(&lb.part_image, &lb.part_text, kappa)?;
    let local = contrastive_from_distances(&d_pi_pt, false, Temperature::Shared(temps.local), incl)?
        + contrastive_from_distances(&d_pi_pt, true, Temperature::Shared(temps.local), incl)?;
    Ok((global_local, global, local))
}

/// Sum of the six contrastive terms.
pub fn contrastive_total<S: Real>(
    b: &Batch<S>,
    temps: &TemperatureSet<S>,
    kappa: S,
    cfg: &LossConfig,
) -> Result<S> {
    let lb = LiftedBatch::new(b, kappa)?;
    let (gl, g, l) = contrastive_terms(&lb, temps, kappa, cfg)?;
    Ok(gl + g + l)
}

/// `max(0, φ(p,q) − η·ω(p))`.
pub fn entail_hinge<S: Real>(p: &Point<S>, q: &Point<S>, eta: f64, k: f64, kappa: S) -> Result<S> {
    let phi = exterior_angle(p, q, kappa)?;
    let omega = aperture(p, k, kappa)?;
    Ok((phi - omega * eta).relu())
}

/// `max(0, φ − η·ω) + α·φ`.
pub fn entail_leaky<S: Real>(
    p: &Point<S>,
    q: &Point<S>,
    eta: f64,
    k: f64,
    alpha: f64,
    kappa: S,
) -> Result<S> {
    let phi = exterior_angle(p, q, kappa)?;
    let omega = aperture(p, k, kappa)?;
    Ok((phi - omega * eta).relu() + phi * alpha)
}

/// Per-row leaky entailment values with `p_i` as apex and `q_i` as the
/// entailed point.
pub fn entail_leaky_rows<S: Real>(
    apex: &[Point<S>],
    entailed: &[Point<S>],
    eta: f64,
    cfg: &LossConfig,
    kappa: S,
) -> Result<Vec<S>> {
    if apex.len() != entailed.len() {
        return Err(contract("entailment rows must be aligned"));
    }
    apex.iter()
        .zip(entailed)
        .map(|(p, q)| entail_leaky(p, q, eta, cfg.cone.k, cfg.alpha, kappa))
        .collect()
}

/// Calibration loss from per-row entailment values that are already
/// detached from the graph:
/// `Σ_i [ f_i·exp(−u(p_i)) + u(p_i) ] + sign·H(softmax(u(p)))`.
pub fn calibration_with_factors<S: Real>(
    parts: &[Point<S>],
    factors: &[f64],
    cfg: &LossConfig,
    kappa: S,
) -> Result<S> {
    if parts.is_empty() || parts.len() != factors.len() {
        return Err(contract("calibration needs one entailment factor per part"));
    }
    let u: Vec<S> = parts
        .iter()
        .map(|p| point_uncertainty(p, kappa, cfg.uncertainty_source))
        .collect();
    let rows: Vec<S> = u
        .iter()
        .zip(factors)
        .map(|(&ui, &f)| (-ui).exp() * f + ui)
        .collect();
    Ok(S::sum(&rows) + softmax_entropy(&u)? * cfg.entropy_sign)
}

/// Calibration loss; the entailment factor is a stop-gradient.
pub fn calibration<S: Real>(
    parts: &[Point<S>],
    wholes: &[Point<S>],
    eta: f64,
    cfg: &LossConfig,
    kappa: S,
) -> Result<S> {
    let ent = entail_leaky_rows(parts, wholes, eta, cfg, kappa)?;
    calibration_from_rows(parts, &ent, cfg, kappa)
}

fn calibration_from_rows<S: Real>(
    parts: &[Point<S>],
    ent: &[S],
    cfg: &LossConfig,
    kappa: S,
) -> Result<S> {
    let u: Vec<S> = parts
        .iter()
        .map(|p| point_uncertainty(p, kappa, cfg.uncertainty_source))
        .collect();
    let rows: Vec<S> = u
        .iter()
        .zip(ent)
        .map(|(&ui, &e)| e.stop_gradient() * (-ui).exp() + ui)
        .collect();
    Ok(S::sum(&rows) + softmax_entropy(&u)? * cfg.entropy_sign)
}

/// Stop-gradient values of the calibration terms, frozen at one parameter
/// point. Used to build a finite-difference oracle whose derivative matches
/// stop-gradient semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFactors {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

pub fn calibration_factors<S: Real>(
    b: &Batch<S>,
    cfg: &LossConfig,
    kappa: S,
) -> Result<CalibrationFactors> {
    let lb = LiftedBatch::new(b, kappa)?;
    let eta = cfg.cone.eta_intra;
    let vals = |rows: Vec<S>| rows.into_iter().map(Real::value).collect();
    Ok(CalibrationFactors {
        text: vals(entail_leaky_rows(&lb.part_text, &lb.whole_text_of_part, eta, cfg, kappa)?),
        image: vals(entail_leaky_rows(&lb.part_image, &lb.whole_image_of_part, eta, cfg, kappa)?),
    })
}

/// (inter, intra, calibration) terms.
pub fn entailment_terms<S: Real>(
    lb: &LiftedBatch<S>,
    cfg: &LossConfig,
    kappa: S,
    frozen: Option<&CalibrationFactors>,
) -> Result<(S, S, S)> {
    let (ei, ea) = (cfg.cone.eta_inter, cfg.cone.eta_intra);
    let mut inter = entail_leaky_rows(&lb.part_text, &lb.part_image, ei, cfg, kappa)?;
    inter.extend(entail_leaky_rows(&lb.whole_text, &lb.whole_image, ei, cfg, kappa)?);
    let intra_t = entail_leaky_rows(&lb.part_text, &lb.whole_text_of_part, ea, cfg, kappa)?;
    let intra_i = entail_leaky_rows(&lb.part_image, &lb.whole_image_of_part, ea, cfg, kappa)?;

    let cal = match frozen {
        None => {
            calibration_from_rows(&lb.part_text, &intra_t, cfg, kappa)?
                + calibration_from_rows(&lb.part_image, &intra_i, cfg, kappa)?
        }
        Some(f) => {
            calibration_with_factors(&lb.part_text, &f.text, cfg, kappa)?
                + calibration_with_factors(&lb.part_image, &f.image, cfg, kappa)?
        }
    };
    let intra: Vec<S> = intra_t.into_iter().chain(intra_i).collect();
    Ok((S::sum(&inter), S::sum(&intra), cal))
}

/// `inter + λ_intra·intra + λ_cal·calibration`.
pub fn entailment_total<S: Real>(b: &Batch<S>, cfg: &LossConfig, kappa: S) -> Result<S> {
    let lb = LiftedBatch::new(b, kappa)?;
    let (inter, intra, cal) = entailment_terms(&lb, cfg, kappa, None)?;
    Ok(inter + intra * cfg.lambda_intra + cal * cfg.lambda_cal)
}

fn total_impl<S: Real>(
    b: &Batch<S>,
    temps: &TemperatureSet<S>,
    kappa: S,
    cfg: &LossConfig,
    frozen: Option<&CalibrationFactors>,
) -> Result<LossTerms<S>> {
    let lb = LiftedBatch::new(b, kappa)?;
    let (global_local, global, local) = contrastive_terms(&lb, temps, kappa, cfg)?;
    let (inter, intra, calibration) = entailment_terms(&lb, cfg, kappa, frozen)?;
    let contrastive = global_local + global + local;
    let entailment = inter + intra * cfg.lambda_intra + calibration * cfg.lambda_cal;
    let total = contrastive + entailment * cfg.lambda_ent;
    if !total.value().is_finite() {
        return Err(numerical(format!("non-finite total loss {}", total.value())));
    }
    Ok(LossTerms {
        global,
        local,
        global_local,
        inter,
        intra,
        calibration,
        contrastive,
        entailment,
        total,
    })
}

/// `contrastive_total + λ_ent·entailment_total`, with its decomposition.
pub fn total_loss<S: Real>(
    b: &Batch<S>,
    temps: &TemperatureSet<S>,
    kappa: S,
    cfg: &LossConfig,
) -> Result<LossTerms<S>> {
    total_impl(b, temps, kappa, cfg, None)
}

/// [`total_loss`] with the calibration factors held at `frozen`.
pub fn total_loss_frozen<S: Real>(
    b: &Batch<S>,
    temps: &TemperatureSet<S>,
    kappa: S,
    cfg: &LossConfig,
    frozen: &CalibrationFactors,
) -> Result<LossTerms<S>> {
    total_impl(b, temps, kappa, cfg, Some(frozen))
}
