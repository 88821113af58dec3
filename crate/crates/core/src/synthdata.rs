//! Deterministic synthetic part/whole corpus.
//!
//! Scenes get well-separated latents on a sphere. Each part lies on the same
//! sphere, displaced from its scene latent by a chord of length
//! `(1 − representativeness)·spread` in a random direction, so a part's
//! ground-truth representativeness is recoverable from geometry while all
//! latents share one norm. Every concept carries an
//! image view and a text view: the latent plus independent Gaussian noise.
//!
//! File format (JSON lines): a header object
//! `{"format":"uncha-corpus","version":1,"params":{...}}` followed by one
//! [`Concept`] object per line, scenes first, then parts in scene order.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const CORPUS_FORMAT: &str = "uncha-corpus";
pub const CORPUS_VERSION: u32 = 1;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Scene,
    Part,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub level: Level,
    pub parent: Option<usize>,
    pub representativeness: Option<f64>,
    pub latent: Vec<f64>,
    pub image_view: Vec<f64>,
    pub text_view: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub num_scenes: usize,
    pub parts_per_scene: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
    /// Norm of every scene latent.
    pub scene_radius: f64,
    /// Displacement length of a part with representativeness 0.
    pub spread: f64,
    /// Minimum pairwise distance between scene latents.
    pub min_separation: f64,
    /// Representativeness is drawn uniformly from this range.
    pub repr_range: (f64, f64),
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            parts_per_scene: 4,
            latent_dim: 16,
            noise_scale: 0.05,
            seed: 7,
            scene_radius: 1.0,
            spread: 1.5,
            min_separation: 0.5,
            repr_range: (0.2, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub params: GeneratorParams,
    pub scenes: Vec<Concept>,
    pub parts: Vec<Concept>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    params: GeneratorParams,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn noisy(rng: &mut ChaCha8Rng, latent: &[f64], scale: f64) -> Vec<f64> {
    let noise = gaussian(rng, latent.len());
    latent.iter().zip(noise).map(|(l, e)| l + scale * e).collect()
}

pub fn generate(params: GeneratorParams) -> Result<Corpus> {
    let p = params;
    if p.num_scenes < 2 {
        return Err(contract("num_scenes must be >= 2"));
    }
    if p.parts_per_scene < 1 {
        return Err(contract("parts_per_scene must be >= 1"));
    }
    if p.latent_dim < 2 {
        return Err(contract("latent_dim must be >= 2"));
    }
    if !(p.noise_scale >= 0.0) || !(p.spread >= 0.0) || !(p.scene_radius > 0.0) {
        return Err(contract("noise_scale and spread must be >= 0, scene_radius > 0"));
    }
    if (1.0 - p.repr_range.0) * p.spread > 2.0 * p.scene_radius {
        return Err(contract("spread too large: part displacement exceeds the scene diameter"));
    }
    let (lo, hi) = p.repr_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(contract("representativeness range must lie in [0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(p.num_scenes);
    for _ in 0..p.num_scenes {
        let mut tries = 0;
        let latent = loop {
            if tries == MAX_REJECTIONS {
                return Err(Error::Config(format!(
                    "could not place {} scenes with separation {} after {MAX_REJECTIONS} retries",
                    p.num_scenes, p.min_separation
                )));
            }
            tries += 1;
            let g = gaussian(&mut rng, p.latent_dim);
            let r = norm(&g);
            if r == 0.0 {
                continue;
            }
            let cand: Vec<f64> = g.iter().map(|x| x / r * p.scene_radius).collect();
            let ok = latents.iter().all(|s| {
                let d: f64 = s.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d.sqrt() >= p.min_separation
            });
            if ok {
                break cand;
            }
        };
        latents.push(latent);
    }

    let mut scenes = Vec::with_capacity(p.num_scenes);
    for (id, latent) in latents.iter().enumerate() {
        let image_view = noisy(&mut rng, latent, p.noise_scale);
        let text_view = noisy(&mut rng, latent, p.noise_scale);
        scenes.push(Concept {
            id,
            level: Level::Scene,
            parent: None,
            representativeness: None,
            latent: latent.clone(),
            image_view,
            text_view,
        });
    }

    let mut parts = Vec::with_capacity(p.num_scenes * p.parts_per_scene);
    for (s, scene_latent) in latents.iter().enumerate() {
        let unit: Vec<f64> = scene_latent.iter().map(|x| x / p.scene_radius).collect();
        for _ in 0..p.parts_per_scene {
            let repr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            // random direction orthogonal to the scene latent
            let dir = loop {
                let g = gaussian(&mut rng, p.latent_dim);
                let along: f64 = g.iter().zip(&unit).map(|(a, b)| a * b).sum();
                let orth: Vec<f64> = g.iter().zip(&unit).map(|(a, b)| a - along * b).collect();
                let r = norm(&orth);
                if r > 1e-12 {
                    break orth.into_iter().map(|x| x / r).collect::<Vec<_>>();
                }
            };
            // rotate along the sphere so the chord to the scene latent has
            // length (1 − repr)·spread and the norm stays scene_radius
            let chord = (1.0 - repr) * p.spread;
            let theta = 2.0 * (chord / (2.0 * p.scene_radius)).asin();
            let (sin, cos) = theta.sin_cos();
            let latent: Vec<f64> = unit
                .iter()
                .zip(&dir)
                .map(|(u, d)| p.scene_radius * (cos * u + sin * d))
                .collect();
            let image_view = noisy(&mut rng, &latent, p.noise_scale);
            let text_view = noisy(&mut rng, &latent, p.noise_scale);
            parts.push(Concept {
                id: p.num_scenes + parts.len(),
                level: Level::Part,
                parent: Some(s),
                representativeness: Some(repr),
                latent,
                image_view,
                text_view,
            });
        }
    }
    Ok(Corpus {
        params: p,
        scenes,
        parts,
    })
}

impl Corpus {
    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Scene index of part `p` (index into `parts`).
    pub fn scene_of_part(&self, p: usize) -> usize {
        self.parts[p].parent.expect("parts always have a parent")
    }

    pub fn parts_of_scene(&self, s: usize) -> std::ops::Range<usize> {
        let k = self.params.parts_per_scene;
        s * k..(s + 1) * k
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            params: self.params,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for c in self.scenes.iter().chain(&self.parts) {
            writeln!(w, "{}", serde_json::to_string(c)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty corpus file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Format(format!(
                "unsupported corpus format {} v{}",
                header.format, header.version
            )));
        }
        let mut scenes = Vec::new();
        let mut parts = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Concept = serde_json::from_str(&line)?;
            match c.level {
                Level::Scene => scenes.push(c),
                Level::Part => parts.push(c),
            }
        }
        let p = header.params;
        if scenes.len() != p.num_scenes || parts.len() != p.num_scenes * p.parts_per_scene {
            return Err(Error::Format("concept counts disagree with the header".into()));
        }
        for (i, part) in parts.iter().enumerate() {
            if part.parent != Some(i / p.parts_per_scene) {
                return Err(Error::Format(format!("part {} has an unexpected parent", part.id)));
            }
        }
        Ok(Corpus {
            params: p,
            scenes,
            parts,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Indices of one batch: `scenes[i]` is the whole of row `i`, `parts[i]` its
/// sampled part (index into `Corpus::parts`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIndices {
    pub scenes: Vec<usize>,
    pub parts: Vec<usize>,
}

pub fn sample_batch(c: &Corpus, batch_size: usize, rng: &mut impl Rng) -> Result<BatchIndices> {
    if batch_size > c.num_scenes() {
        return Err(contract(format!(
            "batch size {batch_size} exceeds the {} scenes in the corpus",
            c.num_scenes()
        )));
    }
    if batch_size < 2 {
        return Err(contract("batch size must be >= 2"));
    }
    let scenes = sample(rng, c.num_scenes(), batch_size).into_vec();
    let k = c.params.parts_per_scene;
    let parts = scenes
        .iter()
        .map(|&s| s * k + rng.random_range(0..k))
        .collect();
    Ok(BatchIndices { scenes, parts })
}

/// Reproducible, random-access sequence of batches: the batch for a step
/// depends only on `(seed, step)`, so resuming needs no RNG state.
#[derive(Debug, Clone, Copy)]
pub struct BatchStream {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchStream {
    pub fn batch_at(&self, c: &Corpus, step: u64) -> Result<BatchIndices> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step.wrapping_add(1));
        sample_batch(c, self.batch_size, &mut rng)
    }
}
