use monomed::crossfit::make_folds;
use monomed::dataset::{ColumnSpec, Dataset, ObservedRecord, OutcomeKind};
use monomed::estimator::{
    eif_weights, estimate, fit_nuisance_bank, EifOptions, EstimandSpec, EstimatorConfig, NuisanceRow, NuisanceSpecs,
};
use monomed::learners::{LearnerSpec, Link};
use monomed::oracle::{
    enumerate_atoms, remainder_check, verify_eif_mean_zero, DgmSpec, Node, RStarReading, Var,
};
use monomed::sim::{effect_metrics, sample_dgm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(n: usize, seed: u64, continuous: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let w: Vec<f64> = vec![rng.gen_range(0..2) as f64, rng.gen::<f64>()];
            let a = rng.gen_range(0..2u8);
            let z = (rng.gen::<f64>() < 0.3 + 0.4 * a as f64) as u8;
            let m = vec![(rng.gen::<f64>() < 0.3 + 0.3 * z as f64) as u8 as f64];
            let y = if continuous {
                m[0] + w[1] + rng.gen::<f64>()
            } else {
                (rng.gen::<f64>() < 0.2 + 0.3 * m[0] + 0.2 * z as f64) as u8 as f64
            };
            ObservedRecord { w, a, z, m, y }
        })
        .collect();
    let kind = if continuous {
        OutcomeKind::Continuous
    } else {
        OutcomeKind::Binary
    };
    Dataset::new(records, vec!["W1".into(), "W2".into()], vec!["M".into()], kind).unwrap()
}

fn small_config(seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        learners: NuisanceSpecs::uniform(&LearnerSpec::default_stack(Link::Logit).with_cv_folds(3)),
        seed,
        ..EstimatorConfig::default()
    }
}

#[test]
fn crossfit_purity_validation_noise_leaves_training_fits_identical() {
    let d = sample_dgm(&DgmSpec::benchmark(), 2_000, 9).unwrap();
    let cfg = EstimatorConfig {
        folds: 3,
        seed: 4,
        ..EstimatorConfig::default()
    };
    let plan = make_folds(d.len(), cfg.folds, cfg.seed).unwrap();
    let base = fit_nuisance_bank(&d, &plan, &cfg, &EstimandSpec::CONTRASTS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for j in 0..plan.folds {
        let noisy: Vec<ObservedRecord> = d
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if plan.assignment[i] != j {
                    return r.clone();
                }
                ObservedRecord {
                    w: r.w.clone(),
                    a: rng.gen_range(0..2),
                    z: rng.gen_range(0..2),
                    m: vec![rng.gen_range(0..2) as f64],
                    y: rng.gen_range(0..2) as f64,
                }
            })
            .collect();
        let d2 = d.with_records(noisy).unwrap();
        let other = fit_nuisance_bank(&d2, &plan, &cfg, &EstimandSpec::CONTRASTS).unwrap();
        assert_eq!(base.fits.len(), other.fits.len());
        for (f1, f2) in base.fits.iter().zip(&other.fits) {
            let (c1, c2) = (&f1.models[j].coefficients, &f2.models[j].coefficients);
            let bits = |c: &[f64]| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(c1), bits(c2), "{} fold {j}", f1.producer);
            assert_eq!(f1.models[j], f2.models[j]);
        }
    }
}

#[test]
fn independent_outcome_concentrates_at_zero() {
    let mut dgm = DgmSpec::benchmark();
    dgm.y = Node::constant(0.4);
    let d = sample_dgm(&dgm, 20_000, 3).unwrap();
    let cfg = EstimatorConfig {
        learners: NuisanceSpecs::uniform(&LearnerSpec::intercept_only(Link::Logit)),
        ..EstimatorConfig::default()
    };
    let e = estimate(&d, &cfg, EstimandSpec::new(1, 0)).unwrap();
    assert!(e.nde.est.abs() < 3.0 * e.nde.se + 1e-12, "{:?}", e.nde);
    assert!(e.nie.est.abs() < 3.0 * e.nie.se + 1e-12, "{:?}", e.nie);
}

#[test]
fn sampled_data_round_trips_through_csv() {
    let d = sample_dgm(&DgmSpec::benchmark(), 500, 1).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let back = Dataset::read_csv(&buf[..], &ColumnSpec::standard(d.w_names(), d.m_names())).unwrap();
    assert_eq!(back, d);
}

fn logistic_node() -> impl Strategy<Value = (f64, [f64; 6])> {
    (-1.5..1.5f64, prop::array::uniform6(-1.5..1.5f64))
}

fn random_dgm() -> impl Strategy<Value = DgmSpec> {
    (
        0.1..0.9f64,
        0.1..0.9f64,
        logistic_node(),
        logistic_node(),
        logistic_node(),
        logistic_node(),
        logistic_node(),
    )
        .prop_map(|(p1, p2, w3, a, z, m, y)| {
            let vars = [Var::W1, Var::W2, Var::W3, Var::A, Var::Z, Var::M];
            let node = |(b, c): (f64, [f64; 6]), parents: usize| {
                Node::logistic(b, &vars[..parents].iter().zip(c).map(|(v, c)| (*v, c)).collect::<Vec<_>>())
            };
            DgmSpec {
                name: "random".into(),
                w1: Node::constant(p1),
                w2: Node::constant(p2),
                w3: node(w3, 2),
                a: node(a, 3),
                z: node(z, 4),
                m: node(m, 5),
                y: node(y, 6),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_identity_holds_exactly(seed in 0u64..1_000, n in 60usize..200, continuous in any::<bool>()) {
        let d = random_dataset(n, seed, continuous);
        let e = estimate(&d, &small_config(seed), EstimandSpec::new(1, 0)).unwrap();
        prop_assert_eq!(e.ate.est - (e.nde.est + e.nie.est), 0.0);
        prop_assert!(e.nde.ci[0] <= e.nde.est && e.nde.est <= e.nde.ci[1]);
    }

    #[test]
    fn estimates_are_deterministic(seed in 0u64..1_000) {
        let d = random_dataset(120, seed, false);
        let cfg = small_config(seed);
        let a = estimate(&d, &cfg, EstimandSpec::new(1, 1)).unwrap();
        let b = estimate(&d, &cfg, EstimandSpec::new(1, 1)).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn atom_masses_sum_to_one(dgm in random_dgm()) {
        let atoms = enumerate_atoms(&dgm).unwrap();
        let total: f64 = atoms.iter().map(|a| a.mass).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shipped_weights_are_mean_zero_and_second_order(dgm in random_dgm(), a in 0u8..2, ap in 0u8..2) {
        let est = EstimandSpec::new(a, ap);
        let variant = Default::default();
        for r in verify_eif_mean_zero(&dgm, est, variant).unwrap() {
            prop_assert!(r.residual < 1e-10, "{:?}", r);
        }
        for r in remainder_check(&dgm, est, 0.1, variant, RStarReading::ZeroA).unwrap() {
            prop_assert!(r.abs_diff < 1e-10, "{:?}", r);
        }
    }

    #[test]
    fn complier_weights_nonnegative_when_take_up_increases(
        q_ap in 0.01..0.99f64, gap in 0.0..1.0f64, g in 0.01..0.99f64,
        e1 in 0.01..0.99f64, e2 in 0.01..0.99f64, r in 0.01..0.99f64,
        obs_a in 0u8..2, obs_z in 0u8..2,
    ) {
        let q_a = q_ap + gap * (0.99 - q_ap);
        let row = NuisanceRow {
            g_a: g, g_ap: 1.0 - g, q1_a: q_a, q1_ap: q_ap, q1_obs: q_a,
            e_a_z1: e1, e_ap_z1: 1.0 - e1, e_a_z0: e2, e_ap_z0: 1.0 - e2, r1_ap: r,
            mu_a_z1: 0.5, mu_a_z0: 0.4, mu_obs: 0.5, rho11: 0.5, rho10: 0.4, rho00: 0.3,
        };
        let rec = ObservedRecord { w: vec![0.0], a: obs_a, z: obs_z, m: vec![1.0], y: 1.0 };
        let h = eif_weights(&rec, &row, EstimandSpec::new(1, 0), EifOptions::default());
        prop_assert!(h.y[1] >= 0.0 && h.m[1] >= 0.0 && h.w[1] >= 0.0);
    }

    #[test]
    fn metrics_ignore_rep_order(vals in prop::collection::vec((-1.0..1.0f64, 0.01..1.0f64, any::<bool>()), 2..40), seed in any::<u64>()) {
        let mut shuffled = vals.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let m1 = effect_metrics(&vals, 0.1, 0.9, 1000);
        let m2 = effect_metrics(&shuffled, 0.1, 0.9, 1000);
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(m1.sqrt_n_abs_bias, (1000f64).sqrt() * m1.abs_bias);
        prop_assert!((0.0..=1.0).contains(&m1.coverage95));
    }

    #[test]
    fn folds_partition_rows(n in 4usize..500, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= 2 * k);
        let plan = make_folds(n, k, seed).unwrap();
        let sizes = plan.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for j in 0..k {
            let mut all = plan.validation(j);
            all.extend(plan.training(j));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
