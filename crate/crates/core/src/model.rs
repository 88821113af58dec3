//! Learnable embeddings for the corpus and the batch objective built on them.
//!
//! Two parameterizations of the origin-tangent vectors are available:
//!
//! * `projected` (default): `v = c_mod · exp(ρ[concept, mod]) · A_mod · view`,
//!   a shared linear map per modality applied to each concept's view vector,
//!   times a per-concept radial log-scale `ρ`.
//! * `free`: `v = c_mod · E_mod[concept]`, one free vector per concept and
//!   modality.
//!
//! Concept ids: scenes are `0..S`, part `p` is `S + p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gradients::{Param, ParamSource, ParameterStore};
use crate::losses::{
    calibration_factors, total_loss, total_loss_frozen, Batch, CalibrationFactors, LossConfig,
    LossTerms, TemperatureSet, TEMPERATURE_MIN,
};
use crate::manifold::{clamp_kappa, exp_origin, Point};
use crate::scalar::Real;
use crate::synthdata::{BatchIndices, Corpus};

pub const KAPPA: &str = "kappa";
pub const TAU_G: &str = "tau_g";
pub const TAU_L: &str = "tau_l";
pub const TAU_GL: &str = "tau_gl";
pub const C_IMAGE: &str = "c_image";
pub const C_TEXT: &str = "c_text";
pub const PROJ_IMAGE: &str = "proj_image";
pub const PROJ_TEXT: &str = "proj_text";
pub const LOG_SCALE: &str = "log_scale";
pub const EMB_IMAGE: &str = "emb_image";
pub const EMB_TEXT: &str = "emb_text";

/// Parameters that never receive weight decay.
pub const NO_DECAY: [&str; 6] = [KAPPA, TAU_G, TAU_L, TAU_GL, C_IMAGE, C_TEXT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Projected,
    Free,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "projected" => Ok(Self::Projected),
            "free" => Ok(Self::Free),
            o => Err(format!("expected `projected` or `free`, got `{o}`")),
        }
    }
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Projected => "projected",
            Self::Free => "free",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Text => "text",
        }
    }

    fn column(self) -> usize {
        match self {
            Self::Image => 0,
            Self::Text => 1,
        }
    }

    fn scale_param(self) -> &'static str {
        match self {
            Self::Image => C_IMAGE,
            Self::Text => C_TEXT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: EmbeddingMode,
    /// Embedding dimension `n`.
    pub dim: usize,
    /// Standard deviation of the random initial tables.
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: EmbeddingMode::Projected,
            dim: 16,
            init_scale: 0.02,
        }
    }
}

fn gaussian_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Param {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Param { rows, cols, data }
}

/// Fresh parameters: κ = 1, temperatures from `temps`, `c = 1/√n`, random
/// tables of scale `spec.init_scale`, log-scales 0.
pub fn init_parameters(
    corpus: &Corpus,
    spec: &ModelSpec,
    temps: &TemperatureSet,
    seed: u64,
) -> Result<ParameterStore> {
    if spec.dim == 0 {
        return Err(contract("embedding dimension must be >= 1"));
    }
    if !(spec.init_scale >= 0.0 && spec.init_scale.is_finite()) {
        return Err(contract("init_scale must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts = corpus.num_scenes() + corpus.num_parts();
    let latent = corpus.params.latent_dim;
    let mut s = ParameterStore::new();
    s.insert(KAPPA, Param::scalar(1.0))?;
    s.insert(TAU_G, Param::scalar(temps.global))?;
    s.insert(TAU_L, Param::scalar(temps.local))?;
    s.insert(TAU_GL, Param::scalar(temps.global_local))?;
    let c = 1.0 / (spec.dim as f64).sqrt();
    s.insert(C_IMAGE, Param::scalar(c))?;
    s.insert(C_TEXT, Param::scalar(c))?;
    match spec.mode {
        EmbeddingMode::Projected => {
            s.insert(PROJ_IMAGE, gaussian_param(&mut rng, spec.dim, latent, spec.init_scale))?;
            s.insert(PROJ_TEXT, gaussian_param(&mut rng, spec.dim, latent, spec.init_scale))?;
            s.insert(LOG_SCALE, Param::zeros(concepts, 2))?;
        }
        EmbeddingMode::Free => {
            s.insert(EMB_IMAGE, gaussian_param(&mut rng, concepts, spec.dim, spec.init_scale))?;
            s.insert(EMB_TEXT, gaussian_param(&mut rng, concepts, spec.dim, spec.init_scale))?;
        }
    }
    Ok(s)
}

/// Projects κ onto `[0.1, 10]` and every temperature onto `[0.01, ∞)`.
pub fn project(store: &mut ParameterStore) -> Result<()> {
    let k = store.scalar(KAPPA)?;
    store.set_scalar(KAPPA, clamp_kappa(k))?;
    for t in [TAU_G, TAU_L, TAU_GL] {
        let v = store.scalar(t)?;
        store.set_scalar(t, v.max(TEMPERATURE_MIN))?;
    }
    Ok(())
}

fn view(corpus: &Corpus, concept: usize, m: Modality) -> &[f64] {
    let s = corpus.num_scenes();
    let c = if concept < s {
        &corpus.scenes[concept]
    } else {
        &corpus.parts[concept - s]
    };
    match m {
        Modality::Image => &c.image_view,
        Modality::Text => &c.text_view,
    }
}

/// Tangent vector of one concept in one modality.
pub fn embed<S: Real>(
    src: &impl ParamSource<S>,
    spec: &ModelSpec,
    corpus: &Corpus,
    concept: usize,
    m: Modality,
) -> Result<Vec<S>> {
    let total = corpus.num_scenes() + corpus.num_parts();
    if concept >= total {
        return Err(contract(format!("concept {concept} out of range ({total})")));
    }
    let c = src.scalar_value(m.scale_param())?;
    let n = spec.dim;
    match spec.mode {
        EmbeddingMode::Projected => {
            let a = src.values(match m {
                Modality::Image => PROJ_IMAGE,
                Modality::Text => PROJ_TEXT,
            })?;
            let x = view(corpus, concept, m);
            let l = x.len();
            if a.len() != n * l {
                return Err(contract("projection shape disagrees with the corpus"));
            }
            let rho = src.values(LOG_SCALE)?[2 * concept + m.column()];
            let scale = c * rho.exp();
            Ok((0..n).map(|j| S::dot_const(&a[j * l..(j + 1) * l], x) * scale).collect())
        }
        EmbeddingMode::Free => {
            let e = src.values(match m {
                Modality::Image => EMB_IMAGE,
                Modality::Text => EMB_TEXT,
            })?;
            Ok(e[concept * n..(concept + 1) * n].iter().map(|&v| v * c).collect())
        }
    }
}

pub fn part_concept(corpus: &Corpus, part: usize) -> usize {
    corpus.num_scenes() + part
}

/// The four aligned embedding sets of a batch (row `i`'s part belongs to row
/// `i`'s whole).
pub fn build_batch<S: Real>(
    src: &impl ParamSource<S>,
    spec: &ModelSpec,
    corpus: &Corpus,
    idx: &BatchIndices,
) -> Result<Batch<S>> {
    let set = |ids: &mut dyn Iterator<Item = usize>, m| -> Result<Vec<Vec<S>>> {
        ids.map(|c| embed(src, spec, corpus, c, m)).collect()
    };
    let parts = || idx.parts.iter().map(|&p| part_concept(corpus, p));
    Ok(Batch {
        whole_image: set(&mut idx.scenes.iter().copied(), Modality::Image)?,
        whole_text: set(&mut idx.scenes.iter().copied(), Modality::Text)?,
        part_image: set(&mut parts(), Modality::Image)?,
        part_text: set(&mut parts(), Modality::Text)?,
        part_of: (0..idx.scenes.len()).collect(),
    })
}

pub fn temperatures<S: Real>(src: &impl ParamSource<S>) -> Result<TemperatureSet<S>> {
    Ok(TemperatureSet {
        global: src.scalar_value(TAU_G)?,
        local: src.scalar_value(TAU_L)?,
        global_local: src.scalar_value(TAU_GL)?,
    })
}

/// Total loss of one batch under the current parameters.
pub fn objective<S: Real>(
    src: &impl ParamSource<S>,
    spec: &ModelSpec,
    corpus: &Corpus,
    idx: &BatchIndices,
    cfg: &LossConfig,
) -> Result<LossTerms<S>> {
    let b = build_batch(src, spec, corpus, idx)?;
    total_loss(&b, &temperatures(src)?, src.scalar_value(KAPPA)?, cfg)
}

/// [`objective`] with the calibration factors frozen; its finite differences
/// agree with the stop-gradient semantics of the tape.
pub fn objective_frozen<S: Real>(
    src: &impl ParamSource<S>,
    spec: &ModelSpec,
    corpus: &Corpus,
    idx: &BatchIndices,
    cfg: &LossConfig,
    frozen: &CalibrationFactors,
) -> Result<LossTerms<S>> {
    let b = build_batch(src, spec, corpus, idx)?;
    total_loss_frozen(&b, &temperatures(src)?, src.scalar_value(KAPPA)?, cfg, frozen)
}

pub fn frozen_factors(
    store: &ParameterStore,
    spec: &ModelSpec,
    corpus: &Corpus,
    idx: &BatchIndices,
    cfg: &LossConfig,
) -> Result<CalibrationFactors> {
    let b = build_batch(store, spec, corpus, idx)?;
    calibration_factors(&b, cfg, store.scalar(KAPPA)?)
}

/// Lifted points of every scene and every part in one modality.
pub fn corpus_points(
    store: &ParameterStore,
    spec: &ModelSpec,
    corpus: &Corpus,
    m: Modality,
) -> Result<(Vec<Point<f64>>, Vec<Point<f64>>)> {
    let kappa = store.scalar(KAPPA)?;
    let lift = |c| -> Result<Point<f64>> { Ok(exp_origin(&embed(store, spec, corpus, c, m)?, kappa)) };
    let scenes = (0..corpus.num_scenes()).map(lift).collect::<Result<_>>()?;
    let parts = (0..corpus.num_parts())
        .map(|p| lift(part_concept(corpus, p)))
        .collect::<Result<_>>()?;
    Ok((scenes, parts))
}
