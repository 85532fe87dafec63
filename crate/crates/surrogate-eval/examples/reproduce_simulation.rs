//! Desk-scale reproduction of one benchmark setting: replicate the full
//! pipeline and print the bias/coverage table for both estimators.
//!
//! Usage: `cargo run --release --example reproduce_simulation [setting] [reps]`

use surrogate_eval::simulation::{
    run_replications, true_values_oracle, ReplicationConfig, SimulationSetting,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which: u8 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let reps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);

    let setting = SimulationSetting::preset(which).expect("setting 1, 2, or 3");
    println!("setting {which}: n = {} per replication, {reps} replications", setting.n);
    let truth = true_values_oracle(&setting, 200_000, 1234);
    println!(
        "truth: delta = {:.4}, delta_s = {:.4}, r = {:.4}",
        truth.delta, truth.delta_s, truth.r
    );

    let table = run_replications(&setting, reps, &ReplicationConfig::default(), 99, &truth);
    if table.n_failed > 0 {
        println!("{} replications failed and were excluded", table.n_failed);
    }
    println!(
        "{:<8} {:<8} {:>8} {:>8} {:>8} {:>9}",
        "est", "target", "bias", "emp se", "mean se", "coverage"
    );
    for row in &table.rows {
        println!(
            "{:<8} {:<8} {:>+8.4} {:>8.4} {:>8.4} {:>9.3}",
            row.estimator, row.target, row.bias, row.empirical_se, row.mean_estimated_se,
            row.coverage
        );
    }
}
