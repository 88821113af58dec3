//! Flat `key = value` configuration files for [`TrainConfig`].
//!
//! One assignment per line, `#` starts a comment. Keys are the ones listed in
//! [`KEYS`]; anything else is rejected. [`render`] writes the fully resolved
//! configuration in the same format, so its output is a valid input.

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 28] = [
    "steps",
    "batch_size",
    "lr",
    "warmup",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "no_decay",
    "eval_interval",
    "checkpoint_interval",
    "seed",
    "dim",
    "embedding_mode",
    "init_scale",
    "tau_g",
    "tau_l",
    "tau_gl",
    "k",
    "eta_inter",
    "eta_intra",
    "alpha",
    "lambda_intra",
    "lambda_cal",
    "lambda_ent",
    "entropy_sign",
    "include_positive",
    "uncertainty_source",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}

/// Sets one key from its text value.
pub fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let v = v.trim();
    match key {
        "steps" => cfg.steps = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "lr" => cfg.lr = parse(key, v)?,
        "warmup" => cfg.warmup = parse(key, v)?,
        "weight_decay" => cfg.weight_decay = parse(key, v)?,
        "beta1" => cfg.beta1 = parse(key, v)?,
        "beta2" => cfg.beta2 = parse(key, v)?,
        "eps" => cfg.eps = parse(key, v)?,
        "no_decay" => {
            cfg.no_decay = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        }
        "eval_interval" => cfg.eval_interval = parse(key, v)?,
        "checkpoint_interval" => cfg.checkpoint_interval = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "dim" => cfg.model.dim = parse(key, v)?,
        "embedding_mode" => cfg.model.mode = parse(key, v)?,
        "init_scale" => cfg.model.init_scale = parse(key, v)?,
        "tau_g" => cfg.loss.temps.global = parse(key, v)?,
        "tau_l" => cfg.loss.temps.local = parse(key, v)?,
        "tau_gl" => cfg.loss.temps.global_local = parse(key, v)?,
        "k" => cfg.loss.cone.k = parse(key, v)?,
        "eta_inter" => cfg.loss.cone.eta_inter = parse(key, v)?,
        "eta_intra" => cfg.loss.cone.eta_intra = parse(key, v)?,
        "alpha" => cfg.loss.alpha = parse(key, v)?,
        "lambda_intra" => cfg.loss.lambda_intra = parse(key, v)?,
        "lambda_cal" => cfg.loss.lambda_cal = parse(key, v)?,
        "lambda_ent" => cfg.loss.lambda_ent = parse(key, v)?,
        "entropy_sign" => cfg.loss.entropy_sign = parse(key, v)?,
        "include_positive" => cfg.loss.include_positive = parse(key, v)?,
        "uncertainty_source" => cfg.loss.uncertainty_source = parse(key, v)?,
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Parses a config file into ordered `(key, value)` pairs.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = vec![];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown config key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn apply_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (k, v) in parse_text(text)? {
        apply(cfg, &k, &v)?;
    }
    Ok(())
}

/// The value of `key` as it would be written in a config file.
pub fn value_of(cfg: &TrainConfig, key: &str) -> Result<String> {
    let l = &cfg.loss;
    Ok(match key {
        "steps" => cfg.steps.to_string(),
        "batch_size" => cfg.batch_size.to_string(),
        "lr" => cfg.lr.to_string(),
        "warmup" => cfg.warmup.to_string(),
        "weight_decay" => cfg.weight_decay.to_string(),
        "beta1" => cfg.beta1.to_string(),
        "beta2" => cfg.beta2.to_string(),
        "eps" => cfg.eps.to_string(),
        "no_decay" => cfg.no_decay.join(","),
        "eval_interval" => cfg.eval_interval.to_string(),
        "checkpoint_interval" => cfg.checkpoint_interval.to_string(),
        "seed" => cfg.seed.to_string(),
        "dim" => cfg.model.dim.to_string(),
        "embedding_mode" => cfg.model.mode.to_string(),
        "init_scale" => cfg.model.init_scale.to_string(),
        "tau_g" => l.temps.global.to_string(),
        "tau_l" => l.temps.local.to_string(),
        "tau_gl" => l.temps.global_local.to_string(),
        "k" => l.cone.k.to_string(),
        "eta_inter" => l.cone.eta_inter.to_string(),
        "eta_intra" => l.cone.eta_intra.to_string(),
        "alpha" => l.alpha.to_string(),
        "lambda_intra" => l.lambda_intra.to_string(),
        "lambda_cal" => l.lambda_cal.to_string(),
        "lambda_ent" => l.lambda_ent.to_string(),
        "entropy_sign" => l.entropy_sign.to_string(),
        "include_positive" => l.include_positive.to_string(),
        "uncertainty_source" => l.uncertainty_source.to_string(),
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    })
}

pub fn render(cfg: &TrainConfig) -> String {
    KEYS.iter()
        .map(|k| format!("{k} = {}\n", value_of(cfg, k).expect("every listed key renders")))
        .collect()
}
