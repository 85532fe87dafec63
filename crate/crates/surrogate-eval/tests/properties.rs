//! Property-based invariants over randomized inputs.

use proptest::prelude::*;

use surrogate_eval::data::{make_folds, risk_set, validate, RiskSetKind};
use surrogate_eval::inference::variance_r;
use surrogate_eval::learners::{clamp_prob, expit, logit, DesignSpec};
use surrogate_eval::simulation::{generate_setting, SimulationSetting};
use surrogate_eval::tmle::tilt_step;
use surrogate_eval::toy::{generate_toy, ToyDgp};

proptest! {
    #[test]
    fn expit_logit_inverse_on_clamped_range(x in -700.0f64..700.0) {
        let p = clamp_prob(expit(x));
        let back = expit(logit(p).unwrap());
        prop_assert!((back - p).abs() < 1e-12);
    }

    #[test]
    fn expit_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0) {
        if a <= b {
            prop_assert!(expit(a) <= expit(b));
        } else {
            prop_assert!(expit(a) >= expit(b));
        }
    }

    #[test]
    fn design_features_deterministic(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        s in prop::collection::vec(-3.0f64..3.0, 3),
        interactions in any::<bool>(),
        quadratic in any::<bool>(),
    ) {
        let spec = DesignSpec {
            n_covariates: 2,
            n_surrogate_lags: 2,
            interactions,
            quadratic,
            saturated: false,
        };
        let f1 = spec.features(&x, &s);
        let f2 = spec.features(&x, &s);
        prop_assert_eq!(f1.len(), spec.n_features());
        prop_assert_eq!(f1, f2);
    }

    #[test]
    fn generated_benchmark_data_always_validates(
        seed in 0u64..5000,
        which in 1u8..=3,
        n in 20usize..120,
        censor_rate in 0.02f64..0.5,
    ) {
        let mut setting = SimulationSetting::preset(which).unwrap();
        setting.n = n;
        setting.censor_rate = censor_rate;
        let ds = generate_setting(&setting, seed);
        prop_assert!(validate(&ds).is_empty());
    }

    #[test]
    fn folds_partition_subjects(
        seed in 0u64..5000,
        n in 12usize..80,
        n_folds in 2usize..6,
    ) {
        let mut setting = SimulationSetting::preset(1).unwrap();
        setting.n = n;
        setting.censor_rate = 0.05;
        let ds = generate_setting(&setting, seed);
        prop_assume!(ds.arm_size(0) >= n_folds && ds.arm_size(1) >= n_folds);
        let folds = make_folds(&ds, n_folds, seed ^ 0xabcd).unwrap();
        let mut seen = vec![0usize; ds.n()];
        let mut sizes = Vec::new();
        for f in 0..n_folds {
            let idx = folds.fold_indices(f);
            sizes.push(idx.len());
            for i in idx {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1), "every subject in exactly one fold");
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1, "fold sizes within one: {sizes:?}");
    }

    #[test]
    fn hazard_risk_set_nested_in_censoring(seed in 0u64..3000, n in 10usize..100) {
        let ds = generate_toy(&ToyDgp::standard(), n, seed, true);
        for k in 1..=3usize {
            let h = risk_set(&ds, k, RiskSetKind::Hazard, None).unwrap();
            let c = risk_set(&ds, k, RiskSetKind::Censoring, None).unwrap();
            prop_assert!(h.iter().all(|i| c.contains(i)));
        }
    }

    #[test]
    fn variance_r_shift_invariant(
        base in prop::collection::vec(-1.0f64..1.0, 10..40),
        shift_a in -5.0f64..5.0,
        shift_b in -5.0f64..5.0,
    ) {
        let phi: Vec<f64> = base.iter().map(|v| 0.4 + v).collect();
        let phi_s: Vec<f64> = base.iter().map(|v| 0.2 + 0.5 * v * v).collect();
        let shifted_phi: Vec<f64> = phi.iter().map(|v| v + shift_a).collect();
        let shifted_phi_s: Vec<f64> = phi_s.iter().map(|v| v + shift_b).collect();
        let a = variance_r(0.4, 0.2, &phi, &phi_s).unwrap();
        let b = variance_r(0.4, 0.2, &shifted_phi, &shifted_phi_s).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn tilt_solves_its_score(
        initial in prop::collection::vec(0.05f64..0.95, 3..30),
        seed in 0u64..1000,
    ) {
        // Outcomes and weights derived deterministically from the seed.
        let mut state = seed;
        let mut next = || {
            state = surrogate_eval::simulation::splitmix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let outcomes: Vec<f64> = initial.iter().map(|_| next()).collect();
        let weights: Vec<f64> = initial.iter().map(|_| 0.1 + next()).collect();
        let (eps, updated) = tilt_step(&initial, &outcomes, &weights).unwrap();
        let score: f64 = updated
            .iter()
            .zip(&outcomes)
            .zip(&weights)
            .map(|((u, y), w)| w * (y - u))
            .sum();
        let w_sum: f64 = weights.iter().sum();
        if eps.abs() < surrogate_eval::tmle::EPSILON_BOUND {
            prop_assert!(score.abs() <= 1e-9 * w_sum.max(1.0), "score {score} at eps {eps}");
        }
        prop_assert!(updated.iter().all(|u| *u > 0.0 && *u < 1.0));
    }
}
