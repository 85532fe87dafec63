//! Stepdown selection of the surrogate collection horizon: estimate the
//! proportion explained for every candidate horizon, test each against the
//! longest one, and recommend the earliest adequate horizon.
//!
//! Usage: `cargo run --release --example select_horizon [setting] [n] [margin]`

use surrogate_eval::cli::restrict_horizon;
use surrogate_eval::data::make_folds;
use surrogate_eval::estimators::{eval_if_delta, eval_if_delta_s};
use surrogate_eval::inference::{stepdown_from_ifs, StepdownOptions};
use surrogate_eval::nuisance::{crossfit_nuisances, SequentialPlan};
use surrogate_eval::simulation::{generate_setting, SimulationSetting};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which: u8 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let margin: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let t_l = 4usize;

    let mut setting = SimulationSetting::preset(which).expect("setting 1, 2, or 3");
    setting.n = n;
    let dataset = generate_setting(&setting, 17);
    let folds = make_folds(&dataset, 2, 3).expect("folds");

    // Re-run the pipeline once per candidate horizon; the shared fold
    // assignment keeps the stacked influence functions aligned by subject.
    let mut phi_s_by_horizon = Vec::new();
    let mut phi = Vec::new();
    for horizon in 1..=t_l {
        let restricted = restrict_horizon(&dataset, horizon).expect("horizon");
        let plan = SequentialPlan::markov(restricted.grid, restricted.n_covariates());
        let nuis = crossfit_nuisances(&restricted, &folds, &plan).expect("nuisances");
        let phi_s: Vec<f64> = restricted
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| eval_if_delta_s(s, &nuis, i))
            .collect();
        if horizon == t_l {
            phi = restricted
                .subjects
                .iter()
                .enumerate()
                .map(|(i, s)| eval_if_delta(s, &nuis, i))
                .collect();
        }
        phi_s_by_horizon.push(phi_s);
    }

    let delta = phi.iter().sum::<f64>() / n as f64;
    println!("setting {which}, n = {n}, margin = {margin}: delta = {delta:.4}");
    for (idx, phi_s) in phi_s_by_horizon.iter().enumerate() {
        let ds = phi_s.iter().sum::<f64>() / n as f64;
        println!(
            "  horizon {}: delta_s = {:+.4}, r = {:+.4}",
            idx + 1,
            ds,
            1.0 - ds / delta
        );
    }

    let result = stepdown_from_ifs(
        &phi_s_by_horizon,
        &phi,
        margin,
        0.05,
        &StepdownOptions::default(),
    )
    .expect("stepdown");
    for c in &result.candidates {
        println!(
            "  H0 at horizon {}: delta_hat = {:+.4}, tau = {:+.2} -> {}",
            c.j,
            c.delta_hat,
            c.tau,
            if c.rejected { "rejected" } else { "kept" }
        );
    }
    println!("recommended surrogate horizon: {}", result.recommended_t0);
    for note in &result.notes {
        println!("note: {note}");
    }
}
