//! Training loop: AdamW with decoupled weight decay, linear warm-up then
//! cosine decay, projection of κ and temperatures after every step,
//! JSONL metrics and resumable checkpoints.
//!
//! The batch of step `s` is a pure function of `(seed, s)`, so a checkpoint
//! only needs the parameters, the optimizer moments and the step counter to
//! continue the exact trajectory.
//!
//! Checkpoint format: one JSON object
//! `{"format":"uncha-checkpoint","version":1,"step":..,"config_hash":..,
//! "config":{..},"schedule":{..},"params":{name:{rows,cols,data}},"adam":{"t":..,"m":{..},"v":{..}}}`
//! with floats written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::evalmetrics::{geometry_summary, uncertainty_correlation, GeometrySummary, UncertaintyCorrelation};
use crate::gradients::{value_and_grad, GradMap, ParameterStore};
use crate::losses::{LossConfig, LossReport};
use crate::model::{
    init_parameters, objective, project, Modality, ModelSpec, KAPPA, NO_DECAY, TAU_G, TAU_GL, TAU_L,
};
use crate::synthdata::{BatchIndices, BatchStream, Corpus};

pub const CHECKPOINT_FORMAT: &str = "uncha-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Parameters exempt from weight decay.
    pub no_decay: Vec<String>,
    /// Metrics are logged at every multiple of this step count and at the end.
    pub eval_interval: u64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub model: ModelSpec,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 5e-4,
            warmup: 200,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            no_decay: NO_DECAY.iter().map(|s| s.to_string()).collect(),
            eval_interval: 250,
            checkpoint_interval: 0,
            seed: 0,
            model: ModelSpec::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1");
        }
        if self.model.dim == 0 {
            return bad("dim must be >= 1");
        }
        Ok(())
    }
}

/// Learning rate applied by the update made at `step` (0-based): linear
/// warm-up from 0 to the peak, then cosine decay to 0 at `steps`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup);
    if span == 0 {
        return cfg.lr;
    }
    let progress = ((step - cfg.warmup) as f64 / span as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: GradMap,
    pub v: GradMap,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: GradMap = store
            .iter()
            .map(|(k, p)| (k.to_string(), vec![0.0; p.data.len()]))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with learning rate `lr`.
pub fn adamw_update(
    store: &mut ParameterStore,
    adam: &mut AdamState,
    grads: &GradMap,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    adam.t += 1;
    let t = adam.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| contract(format!("no gradient for `{name}`")))?;
        let m = adam.m.get_mut(name).ok_or_else(|| contract(format!("no moments for `{name}`")))?;
        let v = adam.v.get_mut(name).ok_or_else(|| contract(format!("no moments for `{name}`")))?;
        let decay = cfg.weight_decay > 0.0 && !cfg.no_decay.iter().any(|n| n == name);
        for i in 0..p.data.len() {
            if decay {
                p.data[i] *= 1.0 - lr * cfg.weight_decay;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub store: ParameterStore,
    pub adam: AdamState,
}

impl TrainState {
    pub fn init(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        let store = init_parameters(corpus, &cfg.model, &cfg.loss.temps, cfg.seed)?;
        Ok(Self {
            step: 0,
            adam: AdamState::new(&store),
            store,
        })
    }
}

fn stream(cfg: &TrainConfig) -> BatchStream {
    BatchStream {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    }
}

/// Forward, backward, AdamW update at the state's current step, projection.
pub fn train_step(
    state: &mut TrainState,
    corpus: &Corpus,
    idx: &BatchIndices,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let lr = learning_rate(cfg, state.step);
    let (_, grads, report) = value_and_grad(&state.store, |p| {
        let terms = objective(p, &cfg.model, corpus, idx, &cfg.loss)?;
        Ok((terms.total, terms.report()))
    })?;
    adamw_update(&mut state.store, &mut state.adam, &grads, lr, cfg)?;
    project(&mut state.store)?;
    state.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    /// Loss of the batch scheduled for this step, before its update.
    pub loss: LossReport,
    pub kappa: f64,
    pub tau_g: f64,
    pub tau_l: f64,
    pub tau_gl: f64,
    pub geometry: GeometrySummary,
    pub uncertainty_image: UncertaintyCorrelation,
}

pub fn metrics_record(state: &TrainState, corpus: &Corpus, cfg: &TrainConfig) -> Result<MetricsRecord> {
    let idx = stream(cfg).batch_at(corpus, state.step)?;
    let loss = objective(&state.store, &cfg.model, corpus, &idx, &cfg.loss)?.report();
    let s = &state.store;
    let src = cfg.loss.uncertainty_source;
    Ok(MetricsRecord {
        step: state.step,
        lr: learning_rate(cfg, state.step),
        loss,
        kappa: s.scalar(KAPPA)?,
        tau_g: s.scalar(TAU_G)?,
        tau_l: s.scalar(TAU_L)?,
        tau_gl: s.scalar(TAU_GL)?,
        geometry: geometry_summary(corpus, s, &cfg.model, src)?,
        uncertainty_image: uncertainty_correlation(corpus, s, &cfg.model, Modality::Image, src)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    /// Learning rate of the next update.
    pub next_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub schedule: Schedule,
    pub params: ParameterStore,
    pub adam: AdamState,
}

/// SHA-256 of the canonical JSON of the config and corpus parameters.
pub fn config_hash(cfg: &TrainConfig, corpus: &Corpus) -> Result<String> {
    let text = serde_json::to_string(&(cfg, &corpus.params))?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig, hash: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: state.step,
            config_hash: hash.to_string(),
            config: cfg.clone(),
            schedule: Schedule {
                steps: cfg.steps,
                warmup: cfg.warmup,
                peak_lr: cfg.lr,
                next_lr: learning_rate(cfg, state.step),
            },
            params: state.store.clone(),
            adam: state.adam.clone(),
        }
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            store: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Writes `metrics.jsonl`, `checkpoint_<step>.json` and `final.json` here.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    /// Intermediate checkpoints, in step order.
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Serialize)]
struct AbortDump<'a> {
    step: u64,
    reason: String,
    batch: &'a BatchIndices,
    report: Option<LossReport>,
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig, opts: RunOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.batch_size > corpus.num_scenes() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} scenes of the corpus",
            cfg.batch_size,
            corpus.num_scenes()
        )));
    }
    let hash = config_hash(cfg, corpus)?;
    let mut state = match opts.resume {
        Some(c) => {
            if c.config_hash != hash {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match the current config {hash}",
                    c.config_hash
                )));
            }
            c.state()
        }
        None => TrainState::init(corpus, cfg)?,
    };
    let mut log: Option<BufWriter<File>> = match &opts.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut metrics = vec![];
    let mut checkpoints = vec![];
    let mut record = |state: &TrainState, metrics: &mut Vec<MetricsRecord>| -> Result<()> {
        let r = metrics_record(state, corpus, cfg)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&r)?)?;
            w.flush()?;
        }
        metrics.push(r);
        Ok(())
    };
    let st = stream(cfg);
    while state.step < cfg.steps {
        if state.step % cfg.eval_interval == 0 {
            record(&state, &mut metrics)?;
        }
        let idx = st.batch_at(corpus, state.step)?;
        if let Err(e) = train_step(&mut state, corpus, &idx, cfg) {
            if let (Error::Numerical(reason), Some(d)) = (&e, &opts.out_dir) {
                let report = objective(&state.store, &cfg.model, corpus, &idx, &cfg.loss)
                    .ok()
                    .map(|t| t.report());
                let dump = AbortDump {
                    step: state.step,
                    reason: reason.clone(),
                    batch: &idx,
                    report,
                };
                std::fs::write(d.join("abort_dump.json"), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(match e {
                Error::Numerical(r) => Error::Numerical(format!("training aborted at step {}: {r}", state.step)),
                other => other,
            });
        }
        if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 && state.step < cfg.steps {
            let c = Checkpoint::from_state(&state, cfg, &hash);
            if let Some(d) = &opts.out_dir {
                c.save(&d.join(format!("checkpoint_{:08}.json", state.step)))?;
            }
            checkpoints.push(c);
        }
    }
    if metrics.last().map(|m| m.step) != Some(state.step) {
        record(&state, &mut metrics)?;
    }
    let final_checkpoint = Checkpoint::from_state(&state, cfg, &hash);
    if let Some(d) = &opts.out_dir {
        final_checkpoint.save(&d.join("final.json"))?;
    }
    Ok(TrainOutput {
        final_checkpoint,
        metrics,
        checkpoints,
    })
}

/// Per-name gradient map of the loss on one batch (for diagnostics).
pub fn batch_gradients(
    store: &ParameterStore,
    corpus: &Corpus,
    idx: &BatchIndices,
    cfg: &TrainConfig,
) -> Result<(f64, GradMap)> {
    let (v, g, ()) = value_and_grad(store, |p| {
        Ok((objective(p, &cfg.model, corpus, idx, &cfg.loss)?.total, ()))
    })?;
    Ok((v, g))
}

/// Mean absolute update per parameter between two stores.
pub fn update_sizes(a: &ParameterStore, b: &ParameterStore) -> BTreeMap<String, f64> {
    a.iter()
        .filter_map(|(k, p)| {
            let q = b.get(k).ok()?;
            let s: f64 = p.data.iter().zip(&q.data).map(|(x, y)| (x - y).abs()).sum();
            Some((k.to_string(), s / p.data.len() as f64))
        })
        .collect()
}
