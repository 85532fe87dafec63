//! Brute-force true effect values for the three benchmark settings, with
//! Monte-Carlo error bars from batching, plus the generator's censoring
//! fractions.
//!
//! Usage: `cargo run --release --example truth_oracle [oracle_n]`

use surrogate_eval::simulation::{
    censored_fraction, generate_setting, true_values_oracle, SimulationSetting,
};

fn main() {
    let oracle_n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200_000);
    println!("oracle_n = {oracle_n}");
    for which in 1..=3u8 {
        let mut setting = SimulationSetting::preset(which).expect("preset");
        let truth = true_values_oracle(&setting, oracle_n, 1234);
        setting.n = 100_000;
        let censored = censored_fraction(&generate_setting(&setting, 99));
        println!(
            "setting {which}: delta = {:.4} (+/-{:.4}), delta_s = {:.4} (+/-{:.4}), \
             r = {:.4} (+/-{:.4}), censored before t = {:.1}%",
            truth.delta,
            truth.mc_se_delta,
            truth.delta_s,
            truth.mc_se_delta_s,
            truth.r,
            truth.mc_se,
            100.0 * censored
        );
        println!(
            "           delta from raw counterfactual survival indicators: {:.4} (+/-{:.4})",
            truth.delta_indicator, truth.mc_se_delta_indicator
        );
    }
}
