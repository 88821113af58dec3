//! Independent oracles shared by the integration tests. Written in plain
//! `f64` straight from the formulas, without touching the library's geometry.

#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `[time, space...]` of the lift of tangent vector `v`.
pub fn lift(v: &[f64], kappa: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sk = kappa.sqrt();
    let f = if n == 0.0 { 1.0 } else { (sk * n).sinh() / (sk * n) };
    let space: Vec<f64> = v.iter().map(|x| x * f).collect();
    let s2: f64 = space.iter().map(|x| x * x).sum();
    let mut out = vec![(1.0 / kappa + s2).sqrt()];
    out.extend(space);
    out
}

pub fn minkowski(p: &[f64], q: &[f64]) -> f64 {
    -p[0] * q[0] + p[1..].iter().zip(&q[1..]).map(|(a, b)| a * b).sum::<f64>()
}

pub fn space_norm(p: &[f64]) -> f64 {
    p[1..].iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(p: &[f64], q: &[f64], kappa: f64) -> f64 {
    (-kappa * minkowski(p, q)).max(1.0).acosh() / kappa.sqrt()
}

/// Tangent vector at `p` pointing to `q` (any positive multiple of the log map).
fn log_direction(p: &[f64], q: &[f64], kappa: f64) -> Vec<f64> {
    let a = -kappa * minkowski(p, q);
    q.iter().zip(p).map(|(qi, pi)| qi - a * pi).collect()
}

/// Exterior angle at `p` from the log map: `π − ∠(log_p q, log_p o)`, the
/// angle between the outward radial direction and the direction to `q`.
pub fn exterior_angle_logmap(p: &[f64], q: &[f64], kappa: f64) -> f64 {
    let mut o = vec![0.0; p.len()];
    o[0] = 1.0 / kappa.sqrt();
    let to_q = log_direction(p, q, kappa);
    let to_o = log_direction(p, &o, kappa);
    let c = minkowski(&to_q, &to_o) / (minkowski(&to_q, &to_q).sqrt() * minkowski(&to_o, &to_o).sqrt());
    std::f64::consts::PI - c.clamp(-1.0, 1.0).acos()
}

pub fn aperture(p: &[f64], k: f64, kappa: f64) -> f64 {
    (2.0 * k / (kappa.sqrt() * space_norm(p))).min(1.0).asin()
}

/// The closed form written out directly.
pub fn exterior_angle_closed(p: &[f64], q: &[f64], kappa: f64) -> f64 {
    let ki = kappa * minkowski(p, q);
    let num = q[0] + p[0] * ki;
    let den = space_norm(p) * (ki * ki - 1.0).sqrt();
    (num / den).clamp(-1.0, 1.0).acos()
}

pub fn leaky(p: &[f64], q: &[f64], eta: f64, k: f64, alpha: f64, kappa: f64) -> f64 {
    let phi = exterior_angle_closed(p, q, kappa);
    (phi - eta * aperture(p, k, kappa)).max(0.0) + alpha * phi
}

pub fn unc(p: &[f64]) -> f64 {
    (1.0 + (-space_norm(p)).exp()).ln()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = rng.random_range(lo..hi);
    v.iter().map(|x| x / r * target).collect()
}

// ---------------------------------------------------------------------------
// Trees

/// Random tree on `n` nodes: node 0 is the root, node `i` hangs below a
/// uniformly chosen earlier node. Returns parents and edge weights.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize, unit: bool) -> (Vec<Option<usize>>, Vec<f64>) {
    let mut parent = vec![None];
    let mut weight = vec![0.0];
    for i in 1..n {
        parent.push(Some(rng.random_range(0..i)));
        weight.push(if unit { 1.0 } else { rng.random_range(1..5) as f64 });
    }
    (parent, weight)
}

/// Weighted path length between `a` and `b` by breadth-first search over the
/// undirected tree (edges carry the weight of their child node).
pub fn bfs_path(parent: &[Option<usize>], weight: &[f64], a: usize, b: usize) -> (usize, f64) {
    let n = parent.len();
    let mut adj = vec![vec![]; n];
    for (c, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            adj[c].push((p, weight[c]));
            adj[p].push((c, weight[c]));
        }
    }
    let mut seen = vec![None; n];
    seen[a] = Some((0usize, 0.0));
    let mut queue = VecDeque::from([a]);
    while let Some(x) = queue.pop_front() {
        let (h, w) = seen[x].unwrap();
        for &(y, wy) in &adj[x] {
            if seen[y].is_none() {
                seen[y] = Some((h + 1, w + wy));
                queue.push_back(y);
            }
        }
    }
    seen[b].unwrap()
}

/// Explicit ancestor set of `a` (itself included, root excluded).
pub fn ancestor_set(parent: &[Option<usize>], a: usize) -> Vec<usize> {
    let mut out = vec![];
    let mut x = a;
    while let Some(p) = parent[x] {
        out.push(x);
        x = p;
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Transport

/// Minimum-cost perfect assignment (Hungarian algorithm, O(n³)).
pub fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

/// Exact `(W1, W2)` between two uniform empirical measures: each sample is
/// replicated so both sides carry `lcm(n, m)` atoms of equal mass, then solved
/// as an assignment problem.
pub fn transport_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (n, m) = (a.len(), b.len());
    let gcd = |mut x: usize, mut y: usize| {
        while y != 0 {
            (x, y) = (y, x % y);
        }
        x
    };
    let l = n / gcd(n, m) * m;
    let ra: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, l / n)).collect();
    let rb: Vec<f64> = b.iter().flat_map(|&x| std::iter::repeat_n(x, l / m)).collect();
    let atoms = l as f64;
    let c1: Vec<Vec<f64>> = ra.iter().map(|x| rb.iter().map(|y| (x - y).abs()).collect()).collect();
    let c2: Vec<Vec<f64>> = ra.iter().map(|x| rb.iter().map(|y| (x - y).powi(2)).collect()).collect();
    (assignment_cost(&c1) / atoms, (assignment_cost(&c2) / atoms).sqrt())
}

// ---------------------------------------------------------------------------
// Loss transcriptions for B = 2

pub struct Hyper {
    pub kappa: f64,
    pub tau_g: f64,
    pub tau_l: f64,
    pub tau_gl: f64,
    pub k: f64,
    pub eta_inter: f64,
    pub eta_intra: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_ent: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            kappa: 1.0,
            tau_g: 0.07,
            tau_l: 0.07,
            tau_gl: 0.06,
            k: 0.1,
            eta_inter: 0.7,
            eta_intra: 1.2,
            alpha: 0.1,
            lambda1: 0.5,
            lambda2: 10.0,
            lambda_ent: 0.2,
        }
    }
}

fn two(x: &[Vec<f64>; 2]) -> [&[f64]; 2] {
    [x[0].as_slice(), x[1].as_slice()]
}

/// Two-row contrastive term: the denominator has the single negative.
fn pair_contrastive(a: [&[f64]; 2], t: [&[f64]; 2], tau: [f64; 2], kappa: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        let j = 1 - i;
        let pos = (-dist(a[i], t[i], kappa) / tau[i]).exp();
        let neg = (-dist(a[i], t[j], kappa) / tau[i]).exp();
        s += -(pos / neg).ln();
    }
    s
}

/// Lifted rows `[wi, wt, pi, pt]`, each holding two points.
pub type Rows = [[Vec<f64>; 2]; 4];

pub fn lift_rows(raw: &[[Vec<f64>; 2]; 4], kappa: f64) -> Rows {
    raw.clone().map(|set| set.map(|v| lift(&v, kappa)))
}

pub fn contrastive_total_oracle(r: &Rows, h: &Hyper) -> f64 {
    let [wi, wt, pi, pt] = r;
    let k = h.kappa;
    let ti = [(unc(&pi[0]) / 2.0).exp() * h.tau_gl, (unc(&pi[1]) / 2.0).exp() * h.tau_gl];
    let tt = [(unc(&pt[0]) / 2.0).exp() * h.tau_gl, (unc(&pt[1]) / 2.0).exp() * h.tau_gl];
    let gl = pair_contrastive(two(pi), two(wt), ti, k) + pair_contrastive(two(pt), two(wi), tt, k);
    let g = pair_contrastive(two(wi), two(wt), [h.tau_g; 2], k) + pair_contrastive(two(wt), two(wi), [h.tau_g; 2], k);
    let l = pair_contrastive(two(pi), two(pt), [h.tau_l; 2], k) + pair_contrastive(two(pt), two(pi), [h.tau_l; 2], k);
    gl + g + l
}

fn calibration_pair(parts: &[Vec<f64>; 2], wholes: &[Vec<f64>; 2], h: &Hyper) -> f64 {
    let u = [unc(&parts[0]), unc(&parts[1])];
    let mut s = 0.0;
    for i in 0..2 {
        let e = leaky(&parts[i], &wholes[i], h.eta_intra, h.k, h.alpha, h.kappa);
        s += e * (-u[i]).exp() + u[i];
    }
    let z = u[0].exp() + u[1].exp();
    let w = [u[0].exp() / z, u[1].exp() / z];
    s - (w[0] * w[0].ln() + w[1] * w[1].ln())
}

pub fn entailment_total_oracle(r: &Rows, h: &Hyper) -> f64 {
    let [wi, wt, pi, pt] = r;
    let lk = |p: &[f64], q: &[f64], eta| leaky(p, q, eta, h.k, h.alpha, h.kappa);
    let mut inter = 0.0;
    let mut intra = 0.0;
    for i in 0..2 {
        inter += lk(&pt[i], &pi[i], h.eta_inter) + lk(&wt[i], &wi[i], h.eta_inter);
        intra += lk(&pt[i], &wt[i], h.eta_intra) + lk(&pi[i], &wi[i], h.eta_intra);
    }
    let cal = calibration_pair(pt, wt, h) + calibration_pair(pi, wi, h);
    inter + h.lambda1 * intra + h.lambda2 * cal
}

pub fn total_loss_oracle(r: &Rows, h: &Hyper) -> f64 {
    contrastive_total_oracle(r, h) + h.lambda_ent * entailment_total_oracle(r, h)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Sweeps comparing the library with the oracles above. Each returns the
// worst error seen so that tests and the acceptance gate can share them.

use rand::SeedableRng;
use uncha::entailment::{exterior_angle, in_cone};
use uncha::evalmetrics::{self, Taxonomy};
use uncha::losses::{self, Batch, LossConfig, TemperatureSet};
use uncha::manifold::{exp_origin, Point};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn as_point(p: &[f64]) -> Point<f64> {
    Point {
        time: p[0],
        space: p[1..].to_vec(),
    }
}

/// Worst |closed form − log-map oracle| over `pairs` random pairs whose
/// radii, in units of the curvature radius `1/√κ`, lie in `[0.1, r_max]`.
pub fn exterior_angle_sweep(seed: u64, pairs: usize, kappa: f64, r_max: f64) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    let s = kappa.sqrt();
    for _ in 0..pairs {
        let n = g.random_range(2..6);
        let a = rand_vec(&mut g, n, 0.1 / s, r_max / s);
        let b = rand_vec(&mut g, n, 0.1 / s, r_max / s);
        let (p, q) = (exp_origin(&a, kappa), exp_origin(&b, kappa));
        let lib = exterior_angle(&p, &q, kappa).expect("distinct random points");
        let oracle = exterior_angle_logmap(&lift(&a, kappa), &lift(&b, kappa), kappa);
        worst = worst.max((lib - oracle).abs());
    }
    worst
}

/// Number of in-cone pairs whose hinge loss is not exactly zero, out of
/// `pairs` pairs built inside the cone.
pub fn in_cone_hinge_violations(seed: u64, pairs: usize) -> usize {
    let mut g = rng(seed);
    let cfg = LossConfig::default();
    let mut bad = 0;
    let mut tried = 0;
    while tried < pairs {
        let kappa = [0.1, 1.0, 10.0][g.random_range(0..3)];
        let a = rand_vec(&mut g, 3, 0.2, 2.0);
        let push: Vec<f64> = a.iter().map(|x| x * g.random_range(1.2..3.0)).collect();
        let wiggle = rand_vec(&mut g, 3, 0.0, 0.05);
        let b: Vec<f64> = push.iter().zip(&wiggle).map(|(x, w)| x + w).collect();
        let (p, q) = (exp_origin(&a, kappa), exp_origin(&b, kappa));
        let eta = cfg.cone.eta_intra;
        if !in_cone(&p, &q, cfg.cone.k, eta, kappa).unwrap() {
            continue;
        }
        tried += 1;
        if losses::entail_hinge(&p, &q, eta, cfg.cone.k, kappa).unwrap() != 0.0 {
            bad += 1;
        }
    }
    bad
}

/// Worst relative deviation of (contrastive_total, entailment_total,
/// total_loss) from the straight-line transcriptions on random B = 2 batches.
pub fn transcription_sweep(seed: u64, batches: usize) -> [f64; 3] {
    let mut g = rng(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..batches {
        let n = g.random_range(2..6);
        let raw: [[Vec<f64>; 2]; 4] =
            std::array::from_fn(|_| std::array::from_fn(|_| rand_vec(&mut g, n, 0.2, 2.0)));
        let h = Hyper {
            kappa: g.random_range(0.3..3.0),
            tau_g: g.random_range(0.03..0.2),
            tau_l: g.random_range(0.03..0.2),
            tau_gl: g.random_range(0.03..0.2),
            ..Hyper::default()
        };
        let mut cfg = LossConfig::default();
        cfg.temps = TemperatureSet {
            global: h.tau_g,
            local: h.tau_l,
            global_local: h.tau_gl,
        };
        let batch = Batch::aligned(raw[0].to_vec(), raw[1].to_vec(), raw[2].to_vec(), raw[3].to_vec());
        let rows = lift_rows(&raw, h.kappa);
        let lib = [
            losses::contrastive_total(&batch, &cfg.temps, h.kappa, &cfg).unwrap(),
            losses::entailment_total(&batch, &cfg, h.kappa).unwrap(),
            losses::total_loss(&batch, &cfg.temps, h.kappa, &cfg).unwrap().total,
        ];
        let oracle = [
            contrastive_total_oracle(&rows, &h),
            entailment_total_oracle(&rows, &h),
            total_loss_oracle(&rows, &h),
        ];
        for k in 0..3 {
            let e = (lib[k] - oracle[k]).abs() / lib[k].abs().max(1.0);
            worst[k] = worst[k].max(e);
        }
    }
    worst
}

fn taxonomy(parent: &[Option<usize>], weight: &[f64]) -> Taxonomy {
    let entries: Vec<(String, Option<String>, f64)> = parent
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("n{i}"), p.map(|p| format!("n{p}")), weight[i]))
        .collect();
    Taxonomy::new(&entries).unwrap()
}

/// Worst error of TIE, LCA error and the set metrics against the BFS and
/// explicit-set oracles on random trees.
pub fn tree_metric_sweep(seed: u64, trees: usize) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trees {
        let n = g.random_range(2..30);
        let (parent, weight) = random_tree(&mut g, n, t % 2 == 0);
        let tax = taxonomy(&parent, &weight);
        for _ in 0..20 {
            let (a, b) = (g.random_range(0..n), g.random_range(0..n));
            let (la, lb) = (format!("n{a}"), format!("n{b}"));
            let (hops, wsum) = bfs_path(&parent, &weight, a, b);
            worst = worst.max((evalmetrics::tie(&la, &lb, &tax).unwrap() as f64 - hops as f64).abs());
            worst = worst.max((evalmetrics::lca_error(&la, &lb, &tax).unwrap() - wsum).abs());
            let (sa, sb) = (ancestor_set(&parent, a), ancestor_set(&parent, b));
            let inter = sa.iter().filter(|x| sb.contains(x)).count() as f64;
            let union = sa.len() as f64 + sb.len() as f64 - inter;
            let ratio = |x: f64, y: f64| if y == 0.0 { 0.0 } else { x / y };
            let m = evalmetrics::hierarchical_set_metrics(&la, &lb, &tax).unwrap();
            worst = worst.max((m.jaccard - ratio(inter, union)).abs());
            worst = worst.max((m.precision - ratio(inter, sa.len() as f64)).abs());
            worst = worst.max((m.recall - ratio(inter, sb.len() as f64)).abs());
        }
    }
    worst
}

/// Worst |recall@k − exhaustive-sort recall@k| on random galleries.
pub fn recall_sweep(seed: u64, trials: usize) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let kappa = g.random_range(0.2..5.0);
        let (nq, ng) = (g.random_range(1..10), g.random_range(1..15));
        let qs: Vec<Vec<f64>> = (0..nq).map(|_| rand_vec(&mut g, 3, 0.0, 2.0)).collect();
        let gs: Vec<Vec<f64>> = (0..ng).map(|_| rand_vec(&mut g, 3, 0.0, 2.0)).collect();
        let truth: Vec<Vec<usize>> = (0..nq)
            .map(|_| (0..g.random_range(1..3)).map(|_| g.random_range(0..ng)).collect())
            .collect();
        let qp: Vec<Point<f64>> = qs.iter().map(|v| exp_origin(v, kappa)).collect();
        let gp: Vec<Point<f64>> = gs.iter().map(|v| exp_origin(v, kappa)).collect();
        for k in 1..=ng {
            let lib = evalmetrics::recall_at_k(&qp, &gp, &truth, k, kappa).unwrap();
            let mut hits = 0;
            for (q, t) in qs.iter().zip(&truth) {
                let lq = lift(q, kappa);
                let mut order: Vec<(f64, usize)> =
                    gs.iter().enumerate().map(|(i, x)| (dist(&lq, &lift(x, kappa), kappa), i)).collect();
                order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                if order[..k].iter().any(|(_, i)| t.contains(i)) {
                    hits += 1;
                }
            }
            worst = worst.max((lib - hits as f64 / nq as f64).abs());
        }
    }
    worst
}

/// Worst |W1, W2 − exact transport| on random samples: equal sizes up to
/// 50, unequal sizes up to 7 (replicated to a common atom count).
pub fn transport_sweep(seed: u64, trials: usize) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (n, m) = if t % 2 == 0 {
            let n = g.random_range(1..=50);
            (n, n)
        } else {
            (g.random_range(1..=7), g.random_range(1..=7))
        };
        let a: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| g.random_range(-3.0..3.0)).collect();
        let (w1, w2) = evalmetrics::wasserstein(&a, &b).unwrap();
        let (o1, o2) = transport_oracle(&a, &b);
        worst = worst.max((w1 - o1).abs()).max((w2 - o2).abs());
    }
    worst
}
