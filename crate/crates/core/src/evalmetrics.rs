//! Hierarchical classification metrics, retrieval recall, distances between
//! radius distributions, and uncertainty correlations.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gradients::ParameterStore;
use crate::manifold::{distance, radius, Point};
use crate::model::{corpus_points, Modality, ModelSpec, KAPPA};
use crate::synthdata::Corpus;
use crate::uncertainty::{point_uncertainty, UncertaintySource};

/// Rooted label tree with weighted edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    // weight of the edge to the parent (0 for the root)
    weight: Vec<f64>,
    depth: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    /// Builds a tree from `(label, parent label, edge weight)` triples; the
    /// root is the single entry whose parent is `None`.
    pub fn new(entries: &[(String, Option<String>, f64)]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (l, _, w)) in entries.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(contract(format!("duplicate taxonomy label `{l}`")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(contract(format!("edge weight of `{l}` must be finite and >= 0")));
            }
        }
        let mut parent = Vec::with_capacity(entries.len());
        let mut roots = 0;
        for (l, p, _) in entries {
            match p {
                None => {
                    roots += 1;
                    parent.push(None);
                }
                Some(p) => parent.push(Some(*index.get(p).ok_or_else(|| {
                    contract(format!("parent `{p}` of `{l}` is not a label"))
                })?)),
            }
        }
        if roots != 1 {
            return Err(contract(format!("taxonomy needs exactly one root, found {roots}")));
        }
        let n = entries.len();
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            // walk up until a node of known depth; a walk longer than n is a cycle
            let mut chain = vec![];
            let mut cur = start;
            while depth[cur] == usize::MAX {
                chain.push(cur);
                if chain.len() > n {
                    return Err(contract("taxonomy contains a cycle"));
                }
                match parent[cur] {
                    None => {
                        depth[cur] = 0;
                        chain.pop();
                        break;
                    }
                    Some(p) => cur = p,
                }
            }
            while let Some(c) = chain.pop() {
                depth[c] = depth[parent[c].expect("non-root")] + 1;
            }
        }
        Ok(Self {
            labels: entries.iter().map(|e| e.0.clone()).collect(),
            weight: entries
                .iter()
                .zip(&parent)
                .map(|(e, p)| if p.is_some() { e.2 } else { 0.0 })
                .collect(),
            parent,
            depth,
            index,
        })
    }

    /// `root → scene{i} → scene{i}/part{j}`, unit weights.
    pub fn from_corpus(c: &Corpus) -> Self {
        let mut e = vec![("root".to_string(), None, 1.0)];
        for s in 0..c.num_scenes() {
            e.push((scene_label(s), Some("root".to_string()), 1.0));
        }
        for p in 0..c.num_parts() {
            let s = c.scene_of_part(p);
            e.push((part_label(c, p), Some(scene_label(s)), 1.0));
        }
        Self::new(&e).expect("corpus taxonomy is a tree")
    }

    /// Text format: one `label parent [weight]` per line, `-` as the root's
    /// parent; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = vec![];
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 2 || f.len() > 3 {
                return Err(Error::Format(format!("taxonomy line {}: expected `label parent [weight]`", n + 1)));
            }
            let parent = (f[1] != "-").then(|| f[1].to_string());
            let w = match f.get(2) {
                Some(w) => w
                    .parse()
                    .map_err(|_| Error::Format(format!("taxonomy line {}: bad weight `{w}`", n + 1)))?,
                None => 1.0,
            };
            entries.push((f[0].to_string(), parent, w));
        }
        Self::new(&entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| contract(format!("unknown label `{label}`")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parent[id]
    }

    pub fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("deeper node has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("deeper node has a parent");
        }
        while a != b {
            a = self.parent[a].expect("distinct nodes below the root");
            b = self.parent[b].expect("distinct nodes below the root");
        }
        a
    }

    fn weight_to_ancestor(&self, mut a: usize, anc: usize) -> f64 {
        let mut w = 0.0;
        while a != anc {
            w += self.weight[a];
            a = self.parent[a].expect("ancestor is above");
        }
        w
    }

    /// The node and all its ancestors except the root.
    pub fn ancestors(&self, mut a: usize) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        while let Some(p) = self.parent[a] {
            s.insert(a);
            a = p;
        }
        s
    }
}

pub fn scene_label(s: usize) -> String {
    format!("scene{s}")
}

pub fn part_label(c: &Corpus, p: usize) -> String {
    let s = c.scene_of_part(p);
    format!("scene{s}/part{}", p - c.parts_of_scene(s).start)
}

/// Tree-induced error: number of edges on the path between the labels.
pub fn tie(pred: &str, truth: &str, t: &Taxonomy) -> Result<usize> {
    let (a, b) = (t.id(pred)?, t.id(truth)?);
    let l = t.lca(a, b);
    Ok(t.depth[a] + t.depth[b] - 2 * t.depth[l])
}

/// Weighted distance from both labels to their lowest common ancestor.
pub fn lca_error(pred: &str, truth: &str, t: &Taxonomy) -> Result<f64> {
    let (a, b) = (t.id(pred)?, t.id(truth)?);
    let l = t.lca(a, b);
    Ok(t.weight_to_ancestor(a, l) + t.weight_to_ancestor(b, l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Jaccard, hierarchical precision and recall over root-excluded ancestor
/// sets. An empty set (the root itself) contributes 0.
pub fn hierarchical_set_metrics(pred: &str, truth: &str, t: &Taxonomy) -> Result<SetMetrics> {
    let a = t.ancestors(t.id(pred)?);
    let b = t.ancestors(t.id(truth)?);
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
    Ok(SetMetrics {
        jaccard: ratio(inter, union),
        precision: ratio(inter, a.len() as f64),
        recall: ratio(inter, b.len() as f64),
    })
}

/// Indices of the `k` most similar gallery items (similarity `−d_L`), ties
/// broken by the lower gallery index.
pub fn top_k(query: &Point<f64>, gallery: &[Point<f64>], k: usize, kappa: f64) -> Result<Vec<usize>> {
    let mut d: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((distance(query, g, kappa)?, i)))
        .collect::<Result<_>>()?;
    d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    Ok(d.into_iter().take(k).map(|x| x.1).collect())
}

/// Fraction of queries whose truth set meets the top-`k` gallery items.
pub fn recall_at_k(
    queries: &[Point<f64>],
    gallery: &[Point<f64>],
    truth: &[Vec<usize>],
    k: usize,
    kappa: f64,
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(contract("empty gallery"));
    }
    if k == 0 {
        return Err(contract("k must be >= 1"));
    }
    if queries.len() != truth.len() || queries.is_empty() {
        return Err(contract("one nonempty truth set per query required"));
    }
    let mut hits = 0usize;
    for (q, t) in queries.iter().zip(truth) {
        let top = top_k(q, gallery, k, kappa)?;
        if top.iter().any(|i| t.contains(i)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionDistances {
    pub w1: f64,
    pub w2: f64,
    /// Squared MMD estimate (can be slightly negative).
    pub mmd: f64,
}

fn sorted(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `(W1, W2)` of two empirical distributions via the quantile coupling.
pub fn wasserstein(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("wasserstein distance of an empty sample"));
    }
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len(), b.len());
    // merge the quantile breakpoints k/n and l/m exactly using integers
    let (mut i, mut j) = (0usize, 0usize);
    let (mut w1, mut w2) = (0.0, 0.0);
    let mut prev = 0usize; // position in units of 1/(n·m)
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let mass = (next - prev) as f64 / (n * m) as f64;
        let d = (a[i] - b[j]).abs();
        w1 += mass * d;
        w2 += mass * d * d;
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok((w1, w2.sqrt()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Squared MMD with a Gaussian kernel whose bandwidth is the median pairwise
/// distance of the pooled sample (1 if that median is 0).
///
/// Equal sizes use the paired U-statistic, which is exactly 0 for identical
/// samples; unequal sizes use the general unbiased estimator. A sample of
/// size 1 has no within-sample pairs and falls back to the biased estimator.
pub fn mmd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("mmd of an empty sample"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut pd = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in 0..i {
            pd.push((pooled[i] - pooled[j]).abs());
        }
    }
    let mut sigma = if pd.is_empty() { 0.0 } else { median(pd) };
    if !(sigma > 0.0) {
        sigma = 1.0;
    }
    let k = |x: f64, y: f64| (-(x - y) * (x - y) / (2.0 * sigma * sigma)).exp();
    let (m, n) = (a.len(), b.len());
    if m == n && m >= 2 {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += k(a[i], a[j]) + k(b[i], b[j]) - k(a[i], b[j]) - k(a[j], b[i]);
                }
            }
        }
        return Ok(s / (m * (m - 1)) as f64);
    }
    let within = |x: &[f64]| -> f64 {
        let l = x.len();
        let mut s = 0.0;
        for i in 0..l {
            for j in 0..l {
                if i != j || l < 2 {
                    s += k(x[i], x[j]);
                }
            }
        }
        if l < 2 {
            s / (l * l) as f64
        } else {
            s / (l * (l - 1)) as f64
        }
    };
    let mut cross = 0.0;
    for &x in a {
        for &y in b {
            cross += k(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

pub fn distribution_distances(a: &[f64], b: &[f64]) -> Result<DistributionDistances> {
    let (w1, w2) = wasserstein(a, b)?;
    Ok(DistributionDistances {
        w1,
        w2,
        mmd: mmd(a, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// True when either variable has zero variance; `r` is then 0.
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(contract("correlation needs two equal-length samples of size >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Ranks starting at 1; ties get their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyCorrelation {
    /// Pearson r between part uncertainty and part-to-whole similarity.
    pub similarity: Correlation,
    /// Spearman rank correlation between part uncertainty and
    /// `1 − representativeness`.
    pub representativeness: Correlation,
}

pub fn uncertainty_correlation(
    corpus: &Corpus,
    store: &ParameterStore,
    spec: &ModelSpec,
    m: Modality,
    source: UncertaintySource,
) -> Result<UncertaintyCorrelation> {
    if corpus.num_parts() < 3 {
        return Err(contract("uncertainty correlation needs at least 3 parts"));
    }
    let kappa = store.scalar(KAPPA)?;
    let (scenes, parts) = corpus_points(store, spec, corpus, m)?;
    let mut u = vec![];
    let mut sim = vec![];
    let mut unrep = vec![];
    for (p, pt) in parts.iter().enumerate() {
        let whole = &scenes[corpus.scene_of_part(p)];
        u.push(point_uncertainty(pt, kappa, source));
        sim.push(-distance(pt, whole, kappa)?);
        unrep.push(1.0 - corpus.parts[p].representativeness.unwrap_or(1.0));
    }
    Ok(UncertaintyCorrelation {
        similarity: pearson(&u, &sim)?,
        representativeness: spearman(&u, &unrep)?,
    })
}

/// Mean radius and uncertainty of each embedding group plus the distances
/// between part and whole radius distributions, per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub mean_radius: std::collections::BTreeMap<String, f64>,
    pub mean_uncertainty: std::collections::BTreeMap<String, f64>,
    pub image: DistributionDistances,
    pub text: DistributionDistances,
}

pub fn geometry_summary(
    corpus: &Corpus,
    store: &ParameterStore,
    spec: &ModelSpec,
    source: UncertaintySource,
) -> Result<GeometrySummary> {
    let kappa = store.scalar(KAPPA)?;
    let mut mean_radius = std::collections::BTreeMap::new();
    let mut mean_uncertainty = std::collections::BTreeMap::new();
    let mut dists = vec![];
    for m in Modality::BOTH {
        let (scenes, parts) = corpus_points(store, spec, corpus, m)?;
        let radii = |ps: &[Point<f64>]| ps.iter().map(|p| radius(&p.space, kappa)).collect::<Vec<_>>();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (rw, rp) = (radii(&scenes), radii(&parts));
        let unc = |ps: &[Point<f64>]| {
            mean(&ps.iter().map(|p| point_uncertainty(p, kappa, source)).collect::<Vec<_>>())
        };
        mean_radius.insert(format!("whole_{}", m.name()), mean(&rw));
        mean_radius.insert(format!("part_{}", m.name()), mean(&rp));
        mean_uncertainty.insert(format!("whole_{}", m.name()), unc(&scenes));
        mean_uncertainty.insert(format!("part_{}", m.name()), unc(&parts));
        dists.push(distribution_distances(&rp, &rw)?);
    }
    Ok(GeometrySummary {
        mean_radius,
        mean_uncertainty,
        image: dists[0],
        text: dists[1],
    })
}

/// Desk-scale evaluation of a trained store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Whole images classified to the nearest scene text.
    pub accuracy: f64,
    pub mean_tie: f64,
    pub mean_lca: f64,
    pub mean_jaccard: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// Whole image → whole text retrieval.
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    /// Part image → whole text retrieval (truth: the part's own scene).
    pub part_recall_at_1: f64,
    pub part_recall_at_5: f64,
    pub uncertainty_image: UncertaintyCorrelation,
    pub uncertainty_text: UncertaintyCorrelation,
    pub geometry: GeometrySummary,
}

pub fn evaluate(
    corpus: &Corpus,
    store: &ParameterStore,
    spec: &ModelSpec,
    taxonomy: &Taxonomy,
    source: UncertaintySource,
) -> Result<EvalReport> {
    let kappa = store.scalar(KAPPA)?;
    let (img_scenes, img_parts) = corpus_points(store, spec, corpus, Modality::Image)?;
    let (txt_scenes, _) = corpus_points(store, spec, corpus, Modality::Text)?;
    let s = corpus.num_scenes();
    let (mut correct, mut tie_sum, mut lca_sum) = (0usize, 0.0, 0.0);
    let (mut j, mut p, mut r) = (0.0, 0.0, 0.0);
    for (i, q) in img_scenes.iter().enumerate() {
        let pred = top_k(q, &txt_scenes, 1, kappa)?[0];
        correct += (pred == i) as usize;
        let (pl, tl) = (scene_label(pred), scene_label(i));
        tie_sum += tie(&pl, &tl, taxonomy)? as f64;
        lca_sum += lca_error(&pl, &tl, taxonomy)?;
        let m = hierarchical_set_metrics(&pl, &tl, taxonomy)?;
        j += m.jaccard;
        p += m.precision;
        r += m.recall;
    }
    let n = s as f64;
    let whole_truth: Vec<Vec<usize>> = (0..s).map(|i| vec![i]).collect();
    let part_truth: Vec<Vec<usize>> = (0..corpus.num_parts()).map(|q| vec![corpus.scene_of_part(q)]).collect();
    let k5 = 5.min(s);
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_tie: tie_sum / n,
        mean_lca: lca_sum / n,
        mean_jaccard: j / n,
        mean_precision: p / n,
        mean_recall: r / n,
        recall_at_1: recall_at_k(&img_scenes, &txt_scenes, &whole_truth, 1, kappa)?,
        recall_at_5: recall_at_k(&img_scenes, &txt_scenes, &whole_truth, k5, kappa)?,
        part_recall_at_1: recall_at_k(&img_parts, &txt_scenes, &part_truth, 1, kappa)?,
        part_recall_at_5: recall_at_k(&img_parts, &txt_scenes, &part_truth, k5, kappa)?,
        uncertainty_image: uncertainty_correlation(corpus, store, spec, Modality::Image, source)?,
        uncertainty_text: uncertainty_correlation(corpus, store, spec, Modality::Text, source)?,
        geometry: geometry_summary(corpus, store, spec, source)?,
    })
}
