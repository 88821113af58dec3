use proptest::prelude::*;
use uncha::entailment::{aperture, exterior_angle, in_cone};
use uncha::evalmetrics::{hierarchical_set_metrics, lca_error, recall_at_k, tie, wasserstein, Taxonomy};
use uncha::gradients::{value_and_grad, Param, ParamSource, ParameterStore, TapeParams};
use uncha::tape::Var;
use uncha::losses::{
    adaptive_temperatures, contrastive_total, entail_hinge, entail_leaky, entailment_total, total_loss, Batch,
    LossConfig, TemperatureSet,
};
use uncha::manifold::{exp_origin, lorentz_inner, point_from_space, Manifold, TangentEmbedding};
use uncha::uncertainty::{uncertainty, UncertaintySource};

const KAPPAS: [f64; 3] = [0.1, 1.0, 10.0];

fn vec_strategy(n: usize, max: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-max..max, n)
}

fn kappa_strategy() -> impl Strategy<Value = f64> {
    prop::sample::select(KAPPAS.to_vec())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled(v: &[f64], r: f64) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n * r).collect()
}

fn two_point_objective<'t>(p: &TapeParams<'t>) -> uncha::Result<(Var<'t>, ())> {
    let x = p.values("x")?;
    let k = p.scalar_value("k")?;
    let (a, b) = (exp_origin(&x[..3], k), exp_origin(&x[3..], k));
    Ok((uncha::manifold::distance(&a, &b, k)? + uncertainty(&a.space), ()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lift_satisfies_constraint(v in vec_strategy(5, 2.2), kappa in kappa_strategy()) {
        let m = Manifold::new(kappa, 5).unwrap();
        let p = m.lift(&TangentEmbedding::new(v).unwrap()).unwrap();
        let c = lorentz_inner(&p, &p).unwrap() + 1.0 / kappa;
        prop_assert!(c.abs() < 1e-9, "constraint residual {c}");
    }

    #[test]
    fn exp_log_round_trip(v in vec_strategy(4, 2.5), kappa in kappa_strategy()) {
        let m = Manifold::new(kappa, 4).unwrap();
        let back = m.log_origin(&m.lift(&TangentEmbedding::new(v.clone()).unwrap()).unwrap()).unwrap();
        let err = norm(&back.as_slice().iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        prop_assert!(err < 1e-9 * norm(&v).max(1.0));
    }

    #[test]
    fn metric_axioms(a in vec_strategy(3, 1.5), b in vec_strategy(3, 1.5), c in vec_strategy(3, 1.5),
                     kappa in kappa_strategy()) {
        let m = Manifold::new(kappa, 3).unwrap();
        let lift = |v: &Vec<f64>| m.lift(&TangentEmbedding::new(v.clone()).unwrap()).unwrap();
        let (p, q, r) = (lift(&a), lift(&b), lift(&c));
        let dpq = m.distance(&p, &q).unwrap();
        prop_assert!((dpq - m.distance(&q, &p).unwrap()).abs() < 1e-9);
        prop_assert_eq!(m.distance(&p, &p).unwrap(), 0.0);
        prop_assert!(dpq >= 0.0);
        prop_assert!(dpq <= m.distance(&p, &r).unwrap() + m.distance(&r, &q).unwrap() + 1e-9);
    }

    #[test]
    fn radius_is_distance_to_origin_and_monotone(v in vec_strategy(4, 3.0), t in 0.0f64..1.0, kappa in kappa_strategy()) {
        let m = Manifold::new(kappa, 4).unwrap();
        let p = m.lift(&TangentEmbedding::new(v).unwrap()).unwrap();
        let r = m.hyperbolic_radius(p.space());
        let d = m.distance(&p, &m.origin()).unwrap();
        prop_assert!((r - d).abs() < 1e-9 * d.max(1.0));
        let smaller: Vec<f64> = p.space().iter().map(|x| x * t).collect();
        prop_assert!(m.hyperbolic_radius(&smaller) <= r);
    }

    #[test]
    fn uncertainty_decreases_with_norm_and_radius(v in vec_strategy(4, 5.0), t in 0.01f64..0.99, kappa in kappa_strategy()) {
        prop_assume!(norm(&v) > 1e-6);
        let w: Vec<f64> = v.iter().map(|x| x * t).collect();
        prop_assert!(uncertainty(&w) > uncertainty(&v));
        let m = Manifold::new(kappa, 4).unwrap();
        prop_assert!(m.hyperbolic_radius(&w) < m.hyperbolic_radius(&v));
        let u = uncertainty(&v);
        prop_assert!(u > 0.0 && u <= std::f64::consts::LN_2);
    }

    #[test]
    fn uncertainty_is_stable_for_huge_norms(v in vec_strategy(3, 1.0), r in 1.0f64..1e6) {
        prop_assume!(norm(&v) > 1e-3);
        let u = uncertainty(&scaled(&v, r));
        prop_assert!(u.is_finite() && u >= 0.0);
    }

    #[test]
    fn aperture_shrinks_outward(v in vec_strategy(3, 1.0), r1 in 0.01f64..20.0, r2 in 0.01f64..20.0,
                                kappa in kappa_strategy()) {
        prop_assume!(norm(&v) > 1e-3 && r1 < r2);
        let p1 = point_from_space(scaled(&v, r1), kappa);
        let p2 = point_from_space(scaled(&v, r2), kappa);
        prop_assert!(aperture(&p1, 0.1, kappa).unwrap() >= aperture(&p2, 0.1, kappa).unwrap());
    }

    #[test]
    fn radial_continuation_has_zero_angle(v in vec_strategy(4, 1.0), r in 0.1f64..3.0, c in 1.05f64..3.0,
                                          kappa in kappa_strategy()) {
        prop_assume!(norm(&v) > 1e-3);
        let x = scaled(&v, r);
        let p = exp_origin(&x, kappa);
        let q = exp_origin(&x.iter().map(|a| a * c).collect::<Vec<_>>(), kappa);
        prop_assert!(exterior_angle(&p, &q, kappa).unwrap() < 1e-6);
    }

    #[test]
    fn hinge_zero_iff_in_cone(a in vec_strategy(3, 2.0), b in vec_strategy(3, 2.0), eta in 0.5f64..1.5,
                              kappa in kappa_strategy()) {
        prop_assume!(norm(&a) > 1e-2);
        let (p, q) = (exp_origin(&a, kappa), exp_origin(&b, kappa));
        prop_assume!(norm(&b.iter().zip(&a).map(|(x, y)| x - y).collect::<Vec<_>>()) > 1e-3);
        let h = entail_hinge(&p, &q, eta, 0.1, kappa).unwrap();
        prop_assert_eq!(h == 0.0, in_cone(&p, &q, 0.1, eta, kappa).unwrap());
        let phi = exterior_angle(&p, &q, kappa).unwrap();
        let l = entail_leaky(&p, &q, eta, 0.1, 0.1, kappa).unwrap();
        prop_assert!(l >= 0.1 * phi && phi >= 0.0);
        if h == 0.0 {
            prop_assert_eq!(l, 0.1 * phi);
        }
    }

    #[test]
    fn adaptive_temperatures_are_bounded(vs in prop::collection::vec(vec_strategy(3, 4.0), 1..8),
                                         tau in 0.01f64..0.2, kappa in kappa_strategy()) {
        let ps: Vec<_> = vs.iter().map(|v| exp_origin(v, kappa)).collect();
        for src in [UncertaintySource::Norm, UncertaintySource::Radius] {
            for t in adaptive_temperatures(&ps, tau, kappa, src) {
                prop_assert!(t >= tau && t <= std::f64::consts::SQRT_2 * tau * (1.0 + 1e-15));
            }
        }
    }

    #[test]
    fn batch_losses_are_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(vec_strategy(3, 1.5), 4), 3..6),
        seed in 0u64..1000,
    ) {
        let b = rows.len();
        let set = |k: usize| rows.iter().map(|r| r[k].clone()).collect::<Vec<_>>();
        let batch = Batch::aligned(set(0), set(1), set(2), set(3));
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left((seed as usize) % b);
        perm.swap(0, b - 1);
        let shuffled = batch.permuted(&perm);
        let cfg = LossConfig::default();
        let temps = TemperatureSet::default();
        let a = total_loss(&batch, &temps, 1.0, &cfg).unwrap().total;
        let c = total_loss(&shuffled, &temps, 1.0, &cfg).unwrap().total;
        prop_assert!((a - c).abs() <= 1e-9 * a.abs().max(1.0));
        let a = contrastive_total(&batch, &temps, 1.0, &cfg).unwrap();
        let c = contrastive_total(&shuffled, &temps, 1.0, &cfg).unwrap();
        prop_assert!((a - c).abs() <= 1e-9 * a.abs().max(1.0));
        let a = entailment_total(&batch, &cfg, 1.0).unwrap();
        let c = entailment_total(&shuffled, &cfg, 1.0).unwrap();
        prop_assert!((a - c).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn gradients_are_deterministic(v in vec_strategy(6, 2.0), kappa in 0.1f64..10.0) {
        let mut store = ParameterStore::new();
        store.insert("x", Param::new(2, 3, v).unwrap()).unwrap();
        store.insert("k", Param::scalar(kappa)).unwrap();
        let (v1, g1, ()) = value_and_grad(&store, two_point_objective).unwrap();
        let (v2, g2, ()) = value_and_grad(&store, two_point_objective).unwrap();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        let bits = |g: &uncha::gradients::GradMap| {
            g.values().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn tree_metrics_are_symmetric_and_bounded(seed in 0u64..10_000, n in 3usize..20) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut entries = vec![("n0".to_string(), None, 1.0)];
        for i in 1..n {
            entries.push((format!("n{i}"), Some(format!("n{}", rng.random_range(0..i))), 1.0));
        }
        let t = Taxonomy::new(&entries).unwrap();
        let a = format!("n{}", rng.random_range(0..n));
        let b = format!("n{}", rng.random_range(0..n));
        prop_assert_eq!(tie(&a, &b, &t).unwrap(), tie(&b, &a, &t).unwrap());
        prop_assert_eq!(tie(&a, &b, &t).unwrap() as f64, lca_error(&a, &b, &t).unwrap());
        prop_assert_eq!(lca_error(&a, &b, &t).unwrap(), lca_error(&b, &a, &t).unwrap());
        let m = hierarchical_set_metrics(&a, &b, &t).unwrap();
        for x in [m.jaccard, m.precision, m.recall] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(m.jaccard <= m.precision.min(m.recall));
    }

    #[test]
    fn wasserstein_properties(a in prop::collection::vec(-5.0f64..5.0, 1..30),
                              b in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let (w1, w2) = wasserstein(&a, &b).unwrap();
        prop_assert!(w1 >= 0.0 && w2 >= 0.0);
        prop_assert!(w1 <= w2 + 1e-12);
        let (z1, z2) = wasserstein(&a, &a).unwrap();
        prop_assert_eq!((z1, z2), (0.0, 0.0));
        let mut rev = a.clone();
        rev.reverse();
        prop_assert_eq!(wasserstein(&a, &rev).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn recall_is_monotone_in_k(qs in prop::collection::vec(vec_strategy(3, 2.0), 2..8),
                               gs in prop::collection::vec(vec_strategy(3, 2.0), 2..10),
                               seed in 0usize..100) {
        let q: Vec<_> = qs.iter().map(|v| exp_origin(v, 1.0)).collect();
        let g: Vec<_> = gs.iter().map(|v| exp_origin(v, 1.0)).collect();
        let truth: Vec<Vec<usize>> = (0..q.len()).map(|i| vec![(i + seed) % g.len()]).collect();
        let mut prev = 0.0;
        for k in 1..=g.len() {
            let r = recall_at_k(&q, &g, &truth, k, 1.0).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }
}
