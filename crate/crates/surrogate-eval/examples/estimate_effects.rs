//! Full estimation workflow on one generated dataset: cross-fitted
//! nuisances, the one-step plug-in, and the targeted (TML) estimator, with
//! influence-function confidence intervals.
//!
//! Usage: `cargo run --release --example estimate_effects [setting] [n]`

use surrogate_eval::data::make_folds;
use surrogate_eval::estimators::estimate_plugin;
use surrogate_eval::nuisance::{crossfit_nuisances, SequentialPlan};
use surrogate_eval::simulation::{generate_setting, SimulationSetting};
use surrogate_eval::tmle::tmle_estimates;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which: u8 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let mut setting = SimulationSetting::preset(which).expect("setting 1, 2, or 3");
    setting.n = n;
    let dataset = generate_setting(&setting, 7);
    println!(
        "setting {which}, n = {n}: {} treated / {} control",
        dataset.arm_size(1),
        dataset.arm_size(0)
    );

    let folds = make_folds(&dataset, 2, 11).expect("folds");
    let plan = SequentialPlan::markov(dataset.grid, dataset.n_covariates());
    let nuisances = crossfit_nuisances(&dataset, &folds, &plan).expect("nuisance fits");
    if !nuisances.diagnostics.is_empty() {
        println!("nuisance diagnostics:");
        for d in &nuisances.diagnostics {
            println!("  {d}");
        }
    }

    let plugin = estimate_plugin(&dataset, &nuisances, 0.05).expect("plug-in");
    let print = |name: &str, e: &surrogate_eval::estimators::EffectEstimate| {
        println!(
            "  {name:8} = {:+.4}  (se {:.4}, 95% CI [{:+.4}, {:+.4}])",
            e.value, e.se, e.ci.0, e.ci.1
        );
    };
    println!("one-step plug-in:");
    print("delta", &plugin.delta);
    print("delta_s", &plugin.delta_s);
    match &plugin.r {
        Some(r) => print("r", r),
        None => println!(
            "  r undefined: {}",
            plugin.r_undefined_reason.as_deref().unwrap_or("?")
        ),
    }

    let tmle = tmle_estimates(&dataset, &nuisances, &plan, 0.05).expect("tmle");
    println!(
        "targeted (TML), influence equation solved to {:.2e} / {:.2e}:",
        tmle.delta.eif_residual, tmle.delta_s.eif_residual
    );
    print("delta", &tmle.delta.estimate);
    print("delta_s", &tmle.delta_s.estimate);
    if let Some(r) = &tmle.r {
        print("r", r);
    }
}
