//! Finite-difference verification of every loss on randomized inputs.
//!
//! Batch-level cases treat the four embedding sets, κ and the temperatures
//! of a raw [`Batch`] as parameters. Model-level cases differentiate the
//! training objective with respect to every model parameter, in both
//! embedding modes. Losses containing the calibration stop-gradient are
//! compared against finite differences of the same loss with the stopped
//! factors frozen at the base point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradients::{
    finite_diff_check, value_and_grad, FdOptions, GradMap, Param, ParamCheck, ParamSource, ParameterStore,
};
use crate::losses::{
    calibration, calibration_factors, calibration_with_factors, contrastive, contrastive_total, entail_hinge,
    entail_leaky, total_loss, total_loss_frozen, Batch, CalibrationFactors, LiftedBatch, LossConfig,
    TemperatureSet, Temperature,
};
use crate::model::{
    self, init_parameters, objective, objective_frozen, EmbeddingMode, ModelSpec, LOG_SCALE, PROJ_IMAGE,
    PROJ_TEXT, EMB_IMAGE, EMB_TEXT,
};
use crate::scalar::Real;
use crate::synthdata::{generate, BatchStream, GeneratorParams};

const SETS: [&str; 4] = ["whole_image", "whole_text", "part_image", "part_text"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub batch_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub fd: FdOptions,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_sizes: vec![2, 4, 8],
            dims: vec![3, 16],
            fd: FdOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    /// Loss name, e.g. `contrastive`, `total`, `model_total[free]`.
    pub loss: String,
    pub batch: usize,
    pub dim: usize,
    pub params: Vec<ParamCheck>,
}

impl CaseReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }
}

/// Stop-gradient contract of the calibration loss: the tape gradient with
/// respect to the wholes (reached only through the stopped factor) is exactly
/// zero, while the finite difference of the unfrozen loss is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopGradReport {
    pub batch: usize,
    pub dim: usize,
    pub tape_max_abs: f64,
    pub fd_max_abs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cases: Vec<CaseReport>,
    pub stop_gradient: Vec<StopGradReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(CaseReport::pass) && self.stop_gradient.iter().all(|s| s.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases
            .iter()
            .flat_map(|c| c.params.iter().map(|p| p.max_rel_err))
            .fold(0.0, f64::max)
    }

    /// Worst relative error per (loss, parameter).
    pub fn table(&self) -> Vec<(String, String, f64, usize, usize, bool)> {
        let mut rows: std::collections::BTreeMap<(String, String), (f64, usize, usize, bool)> = Default::default();
        for c in &self.cases {
            for p in &c.params {
                let e = rows
                    .entry((c.loss.clone(), p.name.clone()))
                    .or_insert((0.0, 0, 0, true));
                e.0 = e.0.max(p.max_rel_err);
                e.1 += p.checked;
                e.2 += p.skipped;
                e.3 &= p.pass;
            }
        }
        rows.into_iter().map(|((l, n), (e, c, s, ok))| (l, n, e, c, s, ok)).collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random raw batch: tangent vectors of norm around 1, κ in [0.5, 2],
/// temperatures in [0.05, 0.2].
pub fn random_batch_store(rng: &mut ChaCha8Rng, b: usize, n: usize) -> ParameterStore {
    let mut s = ParameterStore::new();
    let sd = 1.0 / (n as f64).sqrt();
    for name in SETS {
        let data = (0..b * n).map(|_| sd * normal(rng)).collect();
        s.insert(name, Param { rows: b, cols: n, data }).expect("fresh names");
    }
    s.insert("kappa", Param::scalar(rng.random_range(0.5..2.0))).expect("fresh");
    for t in ["tau_g", "tau_l", "tau_gl"] {
        s.insert(t, Param::scalar(rng.random_range(0.05..0.2))).expect("fresh");
    }
    s
}

fn rows<S: Copy>(v: &[S], n: usize) -> Vec<Vec<S>> {
    v.chunks(n).map(<[S]>::to_vec).collect()
}

fn batch_of<S: Real>(src: &impl ParamSource<S>, n: usize) -> Result<Batch<S>> {
    Ok(Batch::aligned(
        rows(src.values("whole_image")?, n),
        rows(src.values("whole_text")?, n),
        rows(src.values("part_image")?, n),
        rows(src.values("part_text")?, n),
    ))
}

fn temps_of<S: Real>(src: &impl ParamSource<S>) -> Result<TemperatureSet<S>> {
    Ok(TemperatureSet {
        global: src.scalar_value("tau_g")?,
        local: src.scalar_value("tau_l")?,
        global_local: src.scalar_value("tau_gl")?,
    })
}

/// The batch-level losses, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchLoss {
    Contrastive,
    ContrastiveTotal,
    Hinge,
    Leaky,
    Calibration,
    EntailmentTotal,
    Total,
}

impl BatchLoss {
    pub const ALL: [BatchLoss; 7] = [
        Self::Contrastive,
        Self::ContrastiveTotal,
        Self::Hinge,
        Self::Leaky,
        Self::Calibration,
        Self::EntailmentTotal,
        Self::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Contrastive => "contrastive",
            Self::ContrastiveTotal => "contrastive_total",
            Self::Hinge => "entail_hinge",
            Self::Leaky => "entail_leaky",
            Self::Calibration => "calibration",
            Self::EntailmentTotal => "entailment_total",
            Self::Total => "total",
        }
    }

    fn has_stop_gradient(self) -> bool {
        matches!(self, Self::Calibration | Self::EntailmentTotal | Self::Total)
    }

    /// Evaluates the loss; `frozen` replaces the stop-gradient factors.
    pub fn eval<S: Real>(
        self,
        src: &impl ParamSource<S>,
        n: usize,
        cfg: &LossConfig,
        frozen: Option<&CalibrationFactors>,
    ) -> Result<S> {
        let b = batch_of(src, n)?;
        let kappa = src.scalar_value("kappa")?;
        let temps = temps_of(src)?;
        let eta = cfg.cone.eta_inter;
        let sum_rows = |f: &dyn Fn(usize, &LiftedBatch<S>) -> Result<S>| -> Result<S> {
            let lb = LiftedBatch::new(&b, kappa)?;
            let v = (0..b.len()).map(|i| f(i, &lb)).collect::<Result<Vec<S>>>()?;
            Ok(S::sum(&v))
        };
        match self {
            Self::Contrastive => {
                let lb = LiftedBatch::new(&b, kappa)?;
                contrastive(
                    &lb.part_image,
                    &lb.whole_image_of_part,
                    Temperature::Shared(temps.global),
                    kappa,
                    cfg.include_positive,
                )
            }
            Self::ContrastiveTotal => contrastive_total(&b, &temps, kappa, cfg),
            Self::Hinge => sum_rows(&|i, lb| {
                entail_hinge(&lb.part_text[i], &lb.part_image[i], eta, cfg.cone.k, kappa)
            }),
            Self::Leaky => sum_rows(&|i, lb| {
                entail_leaky(&lb.part_text[i], &lb.part_image[i], eta, cfg.cone.k, cfg.alpha, kappa)
            }),
            Self::Calibration => {
                let lb = LiftedBatch::new(&b, kappa)?;
                match frozen {
                    None => calibration(&lb.part_image, &lb.whole_image_of_part, cfg.cone.eta_intra, cfg, kappa),
                    Some(f) => calibration_with_factors(&lb.part_image, &f.image, cfg, kappa),
                }
            }
            Self::EntailmentTotal => Ok(match frozen {
                None => total_loss(&b, &temps, kappa, cfg)?.entailment,
                Some(f) => total_loss_frozen(&b, &temps, kappa, cfg, f)?.entailment,
            }),
            Self::Total => Ok(match frozen {
                None => total_loss(&b, &temps, kappa, cfg)?.total,
                Some(f) => total_loss_frozen(&b, &temps, kappa, cfg, f)?.total,
            }),
        }
    }
}

fn batch_case(
    loss: BatchLoss,
    store: &ParameterStore,
    n: usize,
    cfg: &LossConfig,
    fd: &FdOptions,
) -> Result<CaseReport> {
    let (_, grads, ()) = value_and_grad(store, |p| Ok((loss.eval(p, n, cfg, None)?, ())))?;
    let frozen = if loss.has_stop_gradient() {
        let b = batch_of(store, n)?;
        Some(calibration_factors(&b, cfg, store.scalar("kappa")?)?)
    } else {
        None
    };
    let params = finite_diff_check(
        store,
        &grads,
        &[],
        |s| loss.eval(s, n, cfg, frozen.as_ref()),
        fd,
    )?;
    Ok(CaseReport {
        loss: loss.name().to_string(),
        batch: store.get("whole_image")?.rows,
        dim: n,
        params,
    })
}

fn stop_gradient_case(store: &ParameterStore, n: usize, cfg: &LossConfig, fd: &FdOptions) -> Result<StopGradReport> {
    let (_, grads, ()) = value_and_grad(store, |p| Ok((BatchLoss::Calibration.eval(p, n, cfg, None)?, ())))?;
    let tape_max_abs = grads["whole_image"].iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut work = store.clone();
    let mut fd_max_abs = 0.0f64;
    for i in 0..store.get("whole_image")?.data.len() {
        let x0 = store.get("whole_image")?.data[i];
        work.get_mut("whole_image")?.data[i] = x0 + fd.step;
        let fp = BatchLoss::Calibration.eval(&work, n, cfg, None)?;
        work.get_mut("whole_image")?.data[i] = x0 - fd.step;
        let fm = BatchLoss::Calibration.eval(&work, n, cfg, None)?;
        work.get_mut("whole_image")?.data[i] = x0;
        fd_max_abs = fd_max_abs.max(((fp - fm) / (2.0 * fd.step)).abs());
    }
    Ok(StopGradReport {
        batch: store.get("whole_image")?.rows,
        dim: n,
        tape_max_abs,
        fd_max_abs,
        pass: tape_max_abs == 0.0 && fd_max_abs > 0.0,
    })
}

/// Model parameters scattered away from the origin so that no pair of
/// points starts near a kink.
fn random_model_store(
    rng: &mut ChaCha8Rng,
    corpus: &crate::synthdata::Corpus,
    spec: &ModelSpec,
) -> Result<ParameterStore> {
    let mut s = init_parameters(corpus, spec, &TemperatureSet::default(), rng.random())?;
    let scale = match spec.mode {
        EmbeddingMode::Projected => 1.5,
        EmbeddingMode::Free => 1.0,
    };
    let sd = scale / spec.init_scale;
    for name in [PROJ_IMAGE, PROJ_TEXT, EMB_IMAGE, EMB_TEXT] {
        if let Ok(p) = s.get_mut(name) {
            p.data.iter_mut().for_each(|x| *x *= sd);
        }
    }
    if let Ok(p) = s.get_mut(LOG_SCALE) {
        p.data.iter_mut().for_each(|x| *x = 0.3 * normal(rng));
    }
    s.set_scalar(model::KAPPA, rng.random_range(0.5..2.0))?;
    for t in [model::TAU_G, model::TAU_L, model::TAU_GL] {
        s.set_scalar(t, rng.random_range(0.05..0.2))?;
    }
    Ok(s)
}

fn model_case(
    mode: EmbeddingMode,
    b: usize,
    n: usize,
    seed: u64,
    cfg: &LossConfig,
    fd: &FdOptions,
) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = generate(GeneratorParams {
        num_scenes: b.max(4),
        parts_per_scene: 2,
        latent_dim: 6,
        seed,
        ..Default::default()
    })?;
    let spec = ModelSpec {
        mode,
        dim: n,
        init_scale: 0.02,
    };
    let store = random_model_store(&mut rng, &corpus, &spec)?;
    let idx = BatchStream { seed, batch_size: b }.batch_at(&corpus, 0)?;
    let (_, grads, ()) = value_and_grad(&store, |p| Ok((objective(p, &spec, &corpus, &idx, cfg)?.total, ())))?;
    let frozen = model::frozen_factors(&store, &spec, &corpus, &idx, cfg)?;
    let params = finite_diff_check(
        &store,
        &grads,
        &[],
        |s| Ok(objective_frozen(s, &spec, &corpus, &idx, cfg, &frozen)?.total),
        fd,
    )?;
    Ok(CaseReport {
        loss: format!("model_total[{mode}]"),
        batch: b,
        dim: n,
        params,
    })
}

pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = LossConfig::default();
    let mut cases = vec![];
    let mut stop_gradient = vec![];
    let mut case_seed = opts.seed;
    for &b in &opts.batch_sizes {
        for &n in &opts.dims {
            case_seed = case_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let store = random_batch_store(&mut rng, b, n);
            let fd = FdOptions {
                seed: case_seed,
                ..opts.fd
            };
            for loss in BatchLoss::ALL {
                cases.push(batch_case(loss, &store, n, &cfg, &fd)?);
            }
            stop_gradient.push(stop_gradient_case(&store, n, &cfg, &fd)?);
            for mode in [EmbeddingMode::Projected, EmbeddingMode::Free] {
                cases.push(model_case(mode, b, n, case_seed, &cfg, &fd)?);
            }
        }
    }
    Ok(GradCheckReport { cases, stop_gradient })
}

/// Gradient map of a batch-level loss (exposed for tests).
pub fn batch_loss_gradients(
    loss: BatchLoss,
    store: &ParameterStore,
    n: usize,
    cfg: &LossConfig,
) -> Result<(f64, GradMap)> {
    let (v, g, ()) = value_and_grad(store, |p| Ok((loss.eval(p, n, cfg, None)?, ())))?;
    Ok((v, g))
}
