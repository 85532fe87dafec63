//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see the lines for passing
//! criteria too).
//!
//! Shared across criteria: the three-setting replication study at n = 1000
//! runs once and feeds both the bias/coverage comparison and the targeted
//! influence-equation checks.

use std::sync::OnceLock;
use std::time::Instant;

use surrogate_eval::data::{make_folds, validate};
use surrogate_eval::estimators::{
    estimate_ipw_delta, estimate_ipw_delta_s, estimate_plugin, estimate_substitution_delta,
    estimate_substitution_delta_s, eval_if_delta, eval_if_delta_s,
};
use surrogate_eval::inference::{
    normal_quantile, stepdown_from_ifs, stepdown_select_t0, StepdownCandidate, StepdownOptions,
};
use surrogate_eval::nuisance::{
    crossfit_nuisances, evaluate_oracle, fit_nuisances_insample, SequentialPlan,
};
use surrogate_eval::simulation::{
    censored_fraction, derive_seed, generate_setting, run_replications, true_values_oracle,
    EstimatorSelection, ReplicationConfig, SimulationTable, SimulationSetting, TruthValues,
};
use surrogate_eval::toy::{generate_toy, ToyDgp, ToyOracle};

const ORACLE_N: usize = 200_000;
const ORACLE_SEED: u64 = 20_240_801;
const SUITE_SEED: u64 = 2_026;
const SUITE_REPS: usize = 300;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

struct SettingRun {
    which: u8,
    truth: TruthValues,
    table: SimulationTable,
}

fn suite_runs() -> &'static Vec<SettingRun> {
    static RUNS: OnceLock<Vec<SettingRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (1..=3u8)
            .map(|which| {
                let setting = SimulationSetting::preset(which).expect("preset");
                let truth = true_values_oracle(&setting, ORACLE_N, ORACLE_SEED);
                let table = run_replications(
                    &setting,
                    SUITE_REPS,
                    &ReplicationConfig::default(),
                    derive_seed(SUITE_SEED, which as u64),
                    &truth,
                );
                SettingRun {
                    which,
                    truth,
                    table,
                }
            })
            .collect()
    })
}

#[test]
fn criterion_1_truth_oracle() {
    // Reported true proportions: 0.028 (setting 1), 0.966 (setting 2), and
    // 0.603/0.608 (setting 3, accepted as the band [0.59, 0.62]); each
    // within three Monte-Carlo standard errors at oracle_n = 2e5, under
    // two minutes per setting.
    let mut pass = true;
    let mut details = Vec::new();
    for (which, check) in [(1u8, Check::Value(0.028)), (2, Check::Value(0.966)), (3, Check::Band(0.59, 0.62))] {
        let setting = SimulationSetting::preset(which).expect("preset");
        let start = Instant::now();
        let truth = true_values_oracle(&setting, ORACLE_N, ORACLE_SEED);
        let elapsed = start.elapsed().as_secs_f64();
        let ok_time = elapsed < 120.0;
        let (ok_value, describe) = match check {
            Check::Value(target) => {
                let tol = 3.0 * truth.mc_se;
                (
                    (truth.r - target).abs() <= tol,
                    format!(
                        "setting {which}: r = {:.4} vs {target} (tol {:.4}, {:.1}s)",
                        truth.r, tol, elapsed
                    ),
                )
            }
            Check::Band(lo, hi) => (
                truth.r >= lo && truth.r <= hi,
                format!(
                    "setting {which}: r = {:.4} vs [{lo}, {hi}] ({:.1}s)",
                    truth.r, elapsed
                ),
            ),
        };
        pass &= ok_value && ok_time;
        details.push(describe);
    }
    let detail = details.join("; ");
    report(1, "truth oracle", pass, &detail);
    assert!(pass, "{detail}");
}

enum Check {
    Value(f64),
    Band(f64, f64),
}

/// Benchmark bias and coverage values being reproduced (per setting,
/// estimator, and target).
const REFERENCE_TABLE: &[(u8, &str, &str, f64, f64)] = &[
    (1, "plugin", "delta", 0.004, 0.965),
    (1, "plugin", "delta_s", 0.000, 0.960),
    (1, "plugin", "r", 0.015, 0.943),
    (1, "tmle", "delta", 0.001, 0.971),
    (1, "tmle", "delta_s", 0.003, 0.972),
    (1, "tmle", "r", -0.007, 0.975),
    (2, "plugin", "delta", 0.004, 0.962),
    (2, "plugin", "delta_s", 0.002, 0.971),
    (2, "plugin", "r", 0.003, 0.955),
    (2, "tmle", "delta", 0.002, 0.954),
    (2, "tmle", "delta_s", 0.013, 0.933),
    (2, "tmle", "r", -0.048, 0.919),
    (3, "plugin", "delta", 0.003, 0.968),
    (3, "plugin", "delta_s", -0.007, 0.961),
    (3, "plugin", "r", 0.030, 0.947),
    (3, "tmle", "delta", 0.006, 0.914),
    (3, "tmle", "delta_s", 0.006, 0.930),
    (3, "tmle", "r", -0.010, 0.938),
];

#[test]
fn criterion_2_simulation_reproduction() {
    let runs = suite_runs();
    let mut pass = true;
    let mut misses = Vec::new();
    for &(which, estimator, target, ref_bias, ref_coverage) in REFERENCE_TABLE {
        let run = runs.iter().find(|r| r.which == which).expect("setting run");
        let row = run
            .table
            .rows
            .iter()
            .find(|r| r.estimator == estimator && r.target == target)
            .expect("table row");
        let bias_ok = (row.bias - ref_bias).abs() <= 0.015;
        let cover_ok = (row.coverage - ref_coverage).abs() <= 0.04;
        if !bias_ok || !cover_ok {
            pass = false;
            misses.push(format!(
                "S{which} {estimator}/{target}: bias {:+.4} vs {ref_bias:+.3}{}, coverage {:.3} vs {ref_coverage:.3}{}",
                row.bias,
                if bias_ok { "" } else { " [out]" },
                row.coverage,
                if cover_ok { "" } else { " [out]" },
            ));
        }
    }
    let detail = if pass {
        format!(
            "all {} cells within +/-0.015 bias and +/-0.04 coverage over {SUITE_REPS} replications",
            REFERENCE_TABLE.len()
        )
    } else {
        format!("{} of {} cells out of band: {}", misses.len(), REFERENCE_TABLE.len(), misses.join(" | "))
    };
    report(2, "simulation reproduction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_3_censoring_fractions() {
    let targets = [(1u8, 0.29), (2, 0.33), (3, 0.33)];
    let mut pass = true;
    let mut details = Vec::new();
    for (which, target) in targets {
        let mut setting = SimulationSetting::preset(which).expect("preset");
        setting.n = 100_000;
        let ds = generate_setting(&setting, derive_seed(ORACLE_SEED, which as u64));
        assert!(validate(&ds).is_empty());
        let frac = censored_fraction(&ds);
        let ok = (frac - target).abs() <= 0.01;
        pass &= ok;
        details.push(format!("setting {which}: {:.3} vs {target}", frac));
    }
    let detail = details.join("; ");
    report(3, "censoring fractions", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_4_double_robustness() {
    // On the discrete toy process at n = 20000, the centered influence
    // function must stay within three standard errors of zero when either
    // the outcome block or the weighting block is deliberately wrong.
    let dgp = ToyDgp::standard();
    let (delta_true, delta_s_true) = dgp.truth();
    let n = 20_000;
    let mut pass = true;
    let mut details = Vec::new();
    for (label, wrong_weights, wrong_outcomes, seed) in [
        ("true outcomes + wrong weights", true, false, 811u64),
        ("true weights + wrong outcomes", false, true, 812u64),
    ] {
        let ds = generate_toy(&dgp, n, seed, true);
        let oracle = ToyOracle {
            dgp: ToyDgp::standard(),
            wrong_weights,
            wrong_outcomes,
        };
        let nuis = evaluate_oracle(&ds, ds.grid, &oracle);
        let est = estimate_plugin(&ds, &nuis, 0.05).expect("plugin");
        for (value, truth, se, target) in [
            (est.delta.value, delta_true, est.delta.se, "phi"),
            (est.delta_s.value, delta_s_true, est.delta_s.se, "phi_S"),
        ] {
            let ok = (value - truth).abs() < 3.0 * se;
            pass &= ok;
            details.push(format!(
                "{label}, {target}: |mean - truth| = {:.4} vs 3se = {:.4}",
                (value - truth).abs(),
                3.0 * se
            ));
        }
    }
    let detail = details.join("; ");
    report(4, "double robustness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_5_tmle_solves_eif() {
    let runs = suite_runs();
    let n = 1000.0f64;
    let tol = 1.0 / (n * n.ln());
    let mut pass = true;
    let mut worst_residual = 0.0f64;
    let mut out_of_range = 0usize;
    let mut checked = 0usize;
    for run in runs.iter() {
        for record in &run.table.records {
            let Some(est) = &record.estimates else { continue };
            for residual in [est.tmle_eif_residual_delta, est.tmle_eif_residual_delta_s] {
                let r = residual.expect("tmle ran in the suite");
                worst_residual = worst_residual.max(r);
                if r >= tol {
                    pass = false;
                }
                checked += 1;
            }
            for value in [est.tmle_delta, est.tmle_delta_s] {
                let v = value.expect("tmle ran").estimate;
                if !(-1.0..=1.0).contains(&v) {
                    out_of_range += 1;
                    pass = false;
                }
            }
        }
    }
    let detail = format!(
        "max |mean EIF| = {worst_residual:.2e} vs tol {tol:.2e} over {checked} checks; {out_of_range} estimates outside [-1, 1]"
    );
    report(5, "tmle influence equation", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_6_identification_equivalence() {
    let mut pass = true;
    let mut details = Vec::new();

    // (a) Setting-1 data at n = 5000 with correctly specified designs: the
    // one-step, IPW-form, and substitution estimates agree within two
    // Monte-Carlo standard errors.
    {
        let mut setting = SimulationSetting::preset(1).expect("preset");
        setting.n = 5000;
        let ds = generate_setting(&setting, derive_seed(ORACLE_SEED, 61));
        let folds = make_folds(&ds, 2, derive_seed(ORACLE_SEED, 62)).expect("folds");
        let plan = SequentialPlan::markov(ds.grid, ds.n_covariates());
        let nuis = crossfit_nuisances(&ds, &folds, &plan).expect("nuisances");
        let plugin = estimate_plugin(&ds, &nuis, 0.05).expect("plugin");
        let ipw_d = estimate_ipw_delta(&ds, &nuis).expect("ipw delta");
        let ipw_s = estimate_ipw_delta_s(&ds, &nuis).expect("ipw delta_s");
        let sub_d = estimate_substitution_delta(&ds, &nuis);
        let sub_s = estimate_substitution_delta_s(&ds, &nuis);
        // IPW variability dominates: scale its tolerance from the
        // per-subject Horvitz-Thompson terms.
        let n = ds.n() as f64;
        let ipw_se = |target: f64, which_s: bool| -> f64 {
            let terms: Vec<f64> = ds
                .subjects
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let single = std::slice::from_ref(&ds.subjects[i]);
                    let mini = surrogate_eval::data::LongitudinalDataset {
                        grid: ds.grid,
                        subjects: single.to_vec(),
                        covariate_names: ds.covariate_names.clone(),
                    };
                    let mut sub_nuis = nuis.clone();
                    let _ = &mut sub_nuis;
                    // Per-subject HT term equals n * (mean over the single
                    // subject); evaluate via the estimator on a singleton.
                    let v = if which_s {
                        estimate_ipw_delta_s_single(&mini, &nuis, i)
                    } else {
                        estimate_ipw_delta_single(&mini, &nuis, i)
                    };
                    v - target
                })
                .collect();
            let var = terms.iter().map(|v| v * v).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        let se_d = ipw_se(ipw_d, false).max(plugin.delta.se);
        let se_s = ipw_se(ipw_s, true).max(plugin.delta_s.se);
        for (a, b, se, label) in [
            (plugin.delta.value, ipw_d, se_d, "one-step vs IPW (delta)"),
            (plugin.delta.value, sub_d, 2.0 * plugin.delta.se, "one-step vs substitution (delta)"),
            (plugin.delta_s.value, ipw_s, se_s, "one-step vs IPW (delta_s)"),
            (plugin.delta_s.value, sub_s, 2.0 * plugin.delta_s.se, "one-step vs substitution (delta_s)"),
        ] {
            let ok = (a - b).abs() <= 2.0 * se;
            pass &= ok;
            details.push(format!("{label}: |{a:.4} - {b:.4}| vs 2se = {:.4}", 2.0 * se));
        }
    }

    // (b) Saturated designs on the discrete toy: exact three-way equality.
    {
        let dgp = ToyDgp::standard();
        let ds = generate_toy(&dgp, 4000, derive_seed(ORACLE_SEED, 63), true);
        let plan = SequentialPlan::saturated(ds.grid, 1);
        let nuis = fit_nuisances_insample(&ds, &plan).expect("saturated fits");
        let plugin = estimate_plugin(&ds, &nuis, 0.05).expect("plugin");
        let ipw_d = estimate_ipw_delta(&ds, &nuis).expect("ipw");
        let ipw_s = estimate_ipw_delta_s(&ds, &nuis).expect("ipw_s");
        let sub_d = estimate_substitution_delta(&ds, &nuis);
        let sub_s = estimate_substitution_delta_s(&ds, &nuis);
        for (a, b, label) in [
            (plugin.delta.value, ipw_d, "one-step = IPW (delta)"),
            (plugin.delta.value, sub_d, "one-step = substitution (delta)"),
            (plugin.delta_s.value, ipw_s, "one-step = IPW (delta_s)"),
            (plugin.delta_s.value, sub_s, "one-step = substitution (delta_s)"),
        ] {
            let ok = (a - b).abs() < 1e-10;
            pass &= ok;
            details.push(format!("{label}: |diff| = {:.2e}", (a - b).abs()));
        }
    }
    let detail = details.join("; ");
    report(6, "identification equivalence", pass, &detail);
    assert!(pass, "{detail}");
}

// Single-subject IPW contributions (the Horvitz-Thompson summands), used to
// scale the agreement tolerance in criterion 6.
fn estimate_ipw_delta_single(
    ds: &surrogate_eval::data::LongitudinalDataset,
    nuis: &surrogate_eval::nuisance::NuisanceSet,
    index: usize,
) -> f64 {
    let subj = &ds.subjects[0];
    let t = nuis.grid.t();
    let g = subj.g;
    let mut w = 1.0;
    for k in 1..=t {
        if !subj.a[k - 1] || subj.y_at(k) == 0.0 {
            return 0.0;
        }
        w /= nuis.gamma_at(g, k, index);
    }
    let e_g = if g == 1 { nuis.e[index] } else { 1.0 - nuis.e[index] };
    let sign = if g == 1 { 1.0 } else { -1.0 };
    sign * w / e_g
}

fn estimate_ipw_delta_s_single(
    ds: &surrogate_eval::data::LongitudinalDataset,
    nuis: &surrogate_eval::nuisance::NuisanceSet,
    index: usize,
) -> f64 {
    let subj = &ds.subjects[0];
    let t = nuis.grid.t();
    let t0 = nuis.grid.t0();
    let g = subj.g;
    let mut w = 1.0;
    for k in 1..=t {
        if !subj.a[k - 1] || subj.y_at(k) == 0.0 {
            return 0.0;
        }
        w /= nuis.gamma_at(g, k, index);
        if k >= 2 && k <= t0 + 1 {
            w *= nuis.pi_star_arm_at(g, k - 1, index) / nuis.pi_arm_at(g, k - 1, index);
        }
    }
    let e_g = if g == 1 { nuis.e[index] } else { 1.0 - nuis.e[index] };
    let sign = if g == 1 { 1.0 } else { -1.0 };
    sign * w / e_g
}

#[test]
fn criterion_7_sqrt_n_consistency() {
    // Plug-in Delta RMSE over 200 replications shrinks by a factor in
    // [2.5, 4.0] as n goes 1000 -> 10000 (sqrt(10) is 3.16).
    let setting = SimulationSetting::preset(1).expect("preset");
    let truth = true_values_oracle(&setting, ORACLE_N, ORACLE_SEED);
    let config = ReplicationConfig {
        n_folds: 2,
        alpha: 0.05,
        estimators: EstimatorSelection {
            plugin: true,
            tmle: false,
        },
        plan: surrogate_eval::simulation::PlanKind::Markov,
    };
    let reps = 200;
    let mut rmse = Vec::new();
    for (idx, n) in [1000usize, 10_000].into_iter().enumerate() {
        let mut s = setting.clone();
        s.n = n;
        let table = run_replications(&s, reps, &config, derive_seed(SUITE_SEED, 70 + idx as u64), &truth);
        assert_eq!(table.n_failed, 0, "replication failures at n = {n}");
        let errs: Vec<f64> = table
            .records
            .iter()
            .filter_map(|r| r.estimates.as_ref())
            .filter_map(|e| e.plugin_delta)
            .map(|o| o.estimate - truth.delta)
            .collect();
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        rmse.push(mse.sqrt());
    }
    let ratio = rmse[0] / rmse[1];
    let pass = (2.5..=4.0).contains(&ratio);
    let detail = format!(
        "RMSE {:.4} (n=1000) / {:.4} (n=10000) = {ratio:.2}, band [2.5, 4.0]",
        rmse[0], rmse[1]
    );
    report(7, "sqrt-n consistency", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_8_stepdown_correctness() {
    let mut pass = true;
    let mut details = Vec::new();

    // (a) Constructed statistics must reproduce hand-computed one-sided
    // z-tests exactly, and the recommendation is the smallest survivor.
    {
        let z = normal_quantile(0.95);
        let cases: Vec<Vec<(usize, f64, f64)>> = vec![
            vec![(1, 0.5, 0.01), (2, 0.0, 0.01)],
            vec![(1, 0.02, 0.01), (2, 0.03, 0.01), (3, -0.01, 0.01)],
            vec![(1, -0.05, 0.05), (2, -0.02, 0.05), (3, -0.01, 0.05)],
            vec![(1, 0.2, 0.01)],
        ];
        for (case_idx, case) in cases.iter().enumerate() {
            let candidates: Vec<StepdownCandidate> = case
                .iter()
                .map(|&(j, delta_hat, se)| StepdownCandidate { j, delta_hat, se })
                .collect();
            let t_l = case.len() + 1;
            let res = stepdown_select_t0(&candidates, t_l, 0.1, 0.05, &StepdownOptions::default())
                .expect("stepdown");
            let mut ok = true;
            let mut survivors = Vec::new();
            for (c, &(j, delta_hat, se)) in res.candidates.iter().zip(case) {
                let hand_reject = delta_hat / se > z;
                ok &= c.rejected == hand_reject && c.j == j;
                if !hand_reject {
                    survivors.push(j);
                }
            }
            let expect_rec = survivors.iter().copied().min().unwrap_or(t_l);
            ok &= res.recommended_t0 == expect_rec;
            pass &= ok;
            details.push(format!("case {case_idx}: {}", if ok { "exact" } else { "MISMATCH" }));
        }
    }

    // (b) Familywise error under a boundary null configuration with the
    // realistic strong positive dependence between candidate statistics.
    {
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;
        let n = 400;
        let t_l = 4;
        let n_sims = 1000;
        let mut false_rejections = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SUITE_SEED, 88));
        for _ in 0..n_sims {
            // Null: R(t, j) = R(t, t_L) - margin for every tested j.
            // Delta = 0.5; Delta_S(t_L) = 0.25, Delta_S(j) = 0.30.
            let mut phi = Vec::with_capacity(n);
            let mut phi_s: Vec<Vec<f64>> = vec![Vec::with_capacity(n); t_l];
            for _ in 0..n {
                let shared: f64 = rng.sample(StandardNormal);
                let own: f64 = rng.sample(StandardNormal);
                phi.push(0.5 + 0.30 * shared + 0.10 * own);
                let base: f64 = rng.sample(StandardNormal);
                for (j, column) in phi_s.iter_mut().enumerate() {
                    let idio: f64 = rng.sample(StandardNormal);
                    let mean = if j + 1 == t_l { 0.25 } else { 0.30 };
                    column.push(mean + 0.25 * shared + 0.20 * base + 0.03 * idio);
                }
            }
            let res = stepdown_from_ifs(&phi_s, &phi, 0.1, 0.05, &StepdownOptions::default())
                .expect("stepdown");
            if res.candidates.iter().any(|c| c.rejected) {
                false_rejections += 1;
            }
        }
        let rate = false_rejections as f64 / n_sims as f64;
        let ok = rate <= 0.05 + 0.02;
        pass &= ok;
        details.push(format!("null FWER = {rate:.3} vs 0.07 over {n_sims} sims"));
    }

    let detail = details.join("; ");
    report(8, "stepdown correctness", pass, &detail);
    assert!(pass, "{detail}");
}
