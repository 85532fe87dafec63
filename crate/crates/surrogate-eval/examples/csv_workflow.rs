//! File-based workflow: write a generated dataset to the wide CSV format,
//! validate it, and run the estimation command end to end — the same path
//! the `surrogate-eval` binary takes.

use surrogate_eval::cli::{
    cmd_estimate, cmd_validate, write_dataset_csv, EstimateConfig,
};
use surrogate_eval::simulation::{generate_setting, EstimatorSelection, PlanKind, SimulationSetting};

fn main() {
    let mut setting = SimulationSetting::preset(1).expect("preset");
    setting.n = 1200;
    let dataset = generate_setting(&setting, 42);

    let dir = std::env::temp_dir().join("surrogate-eval-csv-workflow");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let data_path = dir.join("data.csv");
    let mut buf = Vec::new();
    write_dataset_csv(&dataset, &mut buf).expect("serialize");
    std::fs::write(&data_path, buf).expect("write csv");
    println!("wrote {} subjects to {}", dataset.n(), data_path.display());

    let mut err = std::io::stderr();
    let code = cmd_validate(&data_path, 6, 5, &mut err);
    println!("validate exit code: {code}");

    let config = EstimateConfig {
        input: data_path,
        t: 6,
        t0: 5,
        n_folds: 2,
        seed: 7,
        alpha: 0.05,
        estimators: EstimatorSelection::default(),
        design: PlanKind::Markov,
        output: dir.join("results.json"),
    };
    let code = cmd_estimate(&config, &mut err);
    println!("estimate exit code: {code}");
    let results = std::fs::read_to_string(&config.output).expect("results");
    let parsed: serde_json::Value = serde_json::from_str(&results).expect("json");
    println!(
        "plug-in delta = {}, tmle delta = {}",
        parsed["plugin"]["delta"]["estimate"], parsed["tmle"]["delta"]["estimate"]
    );
    println!("full results at {}", config.output.display());
}
