//! Command-line front end: `generate`, `train`, `eval`, `check-grads`,
//! `export`.
//!
//! Exit codes: 0 success, 1 contract/config/format/io error, 2 numerical
//! error, 3 failed gradient check. Every error prints one machine-parsable
//! line `error kind=<kind> reason="<message>"` on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, Taxonomy};
use crate::gradcheck::{self, GradCheckOptions};
use crate::manifold::{exp_origin, radius};
use crate::model::{embed, part_concept, EmbeddingMode, Modality, KAPPA};
use crate::synthdata::{generate, Corpus, GeneratorParams};
use crate::trainer::{train, Checkpoint, RunOptions, TrainConfig};
use crate::uncertainty::point_uncertainty;

pub const SEED_ENV: &str = "UNCHA_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "uncha", version, about = "Hyperbolic part/whole alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scene/part corpus.
    Generate(GenerateArgs),
    /// Train embeddings on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare tape gradients of every loss with finite differences.
    CheckGrads(CheckGradsArgs),
    /// Dump every embedding with its radius and uncertainty as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for metrics, checkpoints and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    mode: Option<EmbeddingMode>,
    /// `key = value` overrides; flags win over the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// `label parent [weight]` lines; defaults to root → scenes → parts.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckGradsArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Seed from the flag, else `UNCHA_SEED`, else `default`.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn cmd_generate(a: GenerateArgs) -> Result<i32> {
    let d = GeneratorParams::default();
    let params = GeneratorParams {
        num_scenes: a.scenes.unwrap_or(d.num_scenes),
        parts_per_scene: a.parts.unwrap_or(d.parts_per_scene),
        latent_dim: a.dim.unwrap_or(d.latent_dim),
        noise_scale: a.noise.unwrap_or(d.noise_scale),
        spread: a.spread.unwrap_or(d.spread),
        seed: resolve_seed(a.seed, d.seed)?,
        ..d
    };
    log(&format!("generate {}", serde_json::to_string(&params)?));
    let c = generate(params)?;
    c.save(&a.out)?;
    Ok(EXIT_OK)
}

fn resolve_train_config(a: &TrainArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    let mut seed_from_file = false;
    if let Some(p) = &a.config {
        let pairs = config::parse_text(&read_path(p)?)?;
        for (k, v) in pairs {
            seed_from_file |= k == "seed";
            config::apply(&mut cfg, &k, &v)?;
        }
    }
    if a.seed.is_some() || (!seed_from_file && a.resume.is_none()) {
        cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = a.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = a.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    if let Some(v) = a.mode {
        cfg.model.mode = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let corpus = Corpus::load(&a.corpus)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    // A resumed run starts from the configuration stored in the checkpoint.
    let base = resume.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let cfg = resolve_train_config(&a, base)?;
    let rendered = config::render(&cfg);
    log(&format!("train seed={}", cfg.seed));
    for line in rendered.lines() {
        log(&format!("  {line}"));
    }
    if let Some(d) = &a.out {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("resolved_config.txt"), &rendered)?;
    }
    let out = train(
        &corpus,
        &cfg,
        RunOptions {
            out_dir: a.out.clone(),
            resume,
        },
    )?;
    if let Some(last) = out.metrics.last() {
        let g = &last.geometry;
        log(&format!(
            "done step={} loss={:.6} kappa={:.4} radius_part_image={:.4} radius_whole_image={:.4} w1_image={:.4}",
            last.step,
            last.loss.total,
            last.kappa,
            g.mean_radius["part_image"],
            g.mean_radius["whole_image"],
            g.image.w1
        ));
    }
    Ok(EXIT_OK)
}

/// Flattens a JSON value to sorted `a.b.c = value` lines.
fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let corpus = Corpus::load(&a.corpus)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let taxonomy = match &a.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::from_corpus(&corpus),
    };
    log(&format!("eval step={} config_hash={}", ck.step, ck.config_hash));
    let report = evaluate(
        &corpus,
        &ck.params,
        &ck.config.model,
        &taxonomy,
        ck.config.loss.uncertainty_source,
    )?;
    let mut lines = vec![];
    flatten("", &serde_json::to_value(&report)?, &mut lines);
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn cmd_check_grads(a: CheckGradsArgs) -> Result<i32> {
    let opts = GradCheckOptions {
        seed: resolve_seed(a.seed, GradCheckOptions::default().seed)?,
        ..Default::default()
    };
    log(&format!("check-grads {}", serde_json::to_string(&opts)?));
    let report = gradcheck::run(&opts)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<28} {:<12} {:>12} {:>8} {:>8}  result", "loss", "param", "max_rel_err", "checked", "skipped")?;
    for (loss, param, err, checked, skipped, ok) in report.table() {
        let verdict = if ok { "pass" } else { "FAIL" };
        writeln!(out, "{loss:<28} {param:<12} {err:>12.3e} {checked:>8} {skipped:>8}  {verdict}")?;
    }
    for s in &report.stop_gradient {
        let verdict = if s.pass { "pass" } else { "FAIL" };
        writeln!(
            out,
            "stop_gradient B={} n={} tape={:.1e} fd={:.3e}  {verdict}",
            s.batch, s.dim, s.tape_max_abs, s.fd_max_abs
        )?;
    }
    let pass = report.pass();
    writeln!(out, "max_rel_err = {:.3e}", report.max_rel_err())?;
    writeln!(out, "result = {}", if pass { "pass" } else { "fail" })?;
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let corpus = Corpus::load(&a.corpus)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (store, spec) = (&ck.params, &ck.config.model);
    let kappa = store.scalar(KAPPA)?;
    let source = ck.config.loss.uncertainty_source;
    log(&format!("export step={} kappa={kappa}", ck.step));
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    let cols: Vec<String> = (0..spec.dim).map(|j| format!("v{j}")).collect();
    writeln!(w, "id,view,level,radius,uncertainty,{}", cols.join(","))?;
    let concepts = (0..corpus.num_scenes())
        .map(|s| (s, "scene"))
        .chain((0..corpus.num_parts()).map(|p| (part_concept(&corpus, p), "part")));
    for (c, level) in concepts {
        for m in Modality::BOTH {
            let v = embed(store, spec, &corpus, c, m)?;
            let p = exp_origin(&v, kappa);
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{c},{},{level},{},{},{}",
                m.name(),
                radius(&p.space, kappa),
                point_uncertainty(&p, kappa, source),
                vals.join(",")
            )?;
        }
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_ERROR,
    }
}

fn report_error(kind: &str, msg: &str) {
    let one_line = msg.replace('\n', " ");
    eprintln!("error kind={kind} reason={}", serde_json::Value::String(one_line));
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            report_error("usage", e.kind().as_str().unwrap_or("invalid arguments"));
            let _ = e.print();
            return EXIT_ERROR;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CheckGrads(a) => cmd_check_grads(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}

fn read_path(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
}
