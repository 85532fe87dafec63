use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use surrogate_eval::cli::{
    cmd_estimate, cmd_select_t0, cmd_simulate, cmd_validate, EstimateConfig, SelectT0Config,
    SimulateConfig, EXIT_USAGE,
};
use surrogate_eval::simulation::{EstimatorSelection, PlanKind};

/// Evaluation of longitudinal surrogate markers for censored time-to-event
/// outcomes.
#[derive(Parser)]
#[command(name = "surrogate-eval", version, about)]
struct Cli {
    /// Cap worker parallelism; output is identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    /// Outcome horizon (number of discrete time points).
    #[arg(long)]
    t: usize,
    /// Surrogate horizon (number of surrogate columns in the file).
    #[arg(long)]
    t0: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Check a wide-format CSV dataset against the data-model invariants.
    Validate {
        /// Input CSV path.
        input: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Cross-fitted one-step plug-in and TML estimates with standard errors.
    Estimate {
        /// Input CSV path (ignored when --config is given).
        input: Option<PathBuf>,
        #[command(flatten)]
        grid_args: Option<GridArgsOpt>,
        /// JSON config file; overrides every flag.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        n_folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Comma-separated estimator set: plugin, tmle.
        #[arg(long, default_value = "plugin,tmle")]
        estimators: String,
        /// Nuisance design: markov (last surrogate value) or full (history).
        #[arg(long, default_value = "markov")]
        design: String,
        #[arg(long, default_value = "results.json")]
        output: PathBuf,
    },
    /// Reproduce a benchmark simulation setting (bias/coverage table).
    Simulate {
        /// Benchmark setting: 1, 2, or 3.
        #[arg(long)]
        setting: u8,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        /// Subjects per replication.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        n_folds: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "markov")]
        design: String,
        /// Monte-Carlo size of the truth oracle.
        #[arg(long, default_value_t = 200_000)]
        oracle_n: usize,
        #[arg(long, default_value_t = 1234)]
        oracle_seed: u64,
        #[arg(long, default_value = "simulation-out")]
        output_dir: PathBuf,
    },
    /// Stepdown selection of the surrogate collection horizon.
    SelectT0 {
        input: Option<PathBuf>,
        #[command(flatten)]
        grid_args: Option<GridArgsOpt>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Latest candidate horizon t_L (tested candidates are 1..t_L-1).
        #[arg(long, default_value_t = 0)]
        t_l: usize,
        /// Acceptable drop in the proportion explained.
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        n_folds: usize,
        #[arg(long, default_value = "markov")]
        design: String,
        /// Disable the monotone simplification (requires --bootstrap-draws).
        #[arg(long)]
        non_monotone: bool,
        /// Enable the Gaussian-multiplier bootstrap with this many draws.
        #[arg(long)]
        bootstrap_draws: Option<usize>,
        #[arg(long, default_value = "selection.json")]
        output: PathBuf,
    },
}

#[derive(Args)]
struct GridArgsOpt {
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    t0: Option<usize>,
}

fn parse_design(s: &str) -> Result<PlanKind, String> {
    match s {
        "markov" => Ok(PlanKind::Markov),
        "full" | "full_history" => Ok(PlanKind::FullHistory),
        other => Err(format!("unknown design `{other}` (choose markov or full)")),
    }
}

fn parse_estimators(s: &str) -> Result<EstimatorSelection, String> {
    let mut sel = EstimatorSelection {
        plugin: false,
        tmle: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "plugin" => sel.plugin = true,
            "tmle" => sel.tmle = true,
            other => return Err(format!("unknown estimator `{other}`")),
        }
    }
    if !sel.plugin && !sel.tmle {
        return Err("estimator set is empty".into());
    }
    Ok(sel)
}

fn load_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("bad config {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("failed to configure thread pool: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let mut err = std::io::stderr();
    let code = match cli.command {
        Command::Validate { input, grid } => cmd_validate(&input, grid.t, grid.t0, &mut err),
        Command::Estimate {
            input,
            grid_args,
            config,
            n_folds,
            seed,
            alpha,
            estimators,
            design,
            output,
        } => {
            let cfg: Result<EstimateConfig, String> = if let Some(path) = config {
                load_config(&path)
            } else {
                (|| {
                    let input = input.ok_or("missing input path")?;
                    let grid = grid_args.ok_or("missing --t/--t0")?;
                    Ok(EstimateConfig {
                        input,
                        t: grid.t.ok_or("missing --t")?,
                        t0: grid.t0.ok_or("missing --t0")?,
                        n_folds,
                        seed,
                        alpha,
                        estimators: parse_estimators(&estimators)?,
                        design: parse_design(&design)?,
                        output,
                    })
                })()
            };
            match cfg {
                Ok(cfg) => cmd_estimate(&cfg, &mut err),
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_USAGE
                }
            }
        }
        Command::Simulate {
            setting,
            reps,
            n,
            seed,
            n_folds,
            alpha,
            design,
            oracle_n,
            oracle_seed,
            output_dir,
        } => match parse_design(&design) {
            Ok(design) => cmd_simulate(
                &SimulateConfig {
                    setting,
                    reps,
                    n,
                    seed,
                    n_folds,
                    alpha,
                    design,
                    oracle_n,
                    oracle_seed,
                    output_dir,
                },
                &mut err,
            ),
            Err(e) => {
                eprintln!("{e}");
                EXIT_USAGE
            }
        },
        Command::SelectT0 {
            input,
            grid_args,
            config,
            t_l,
            margin,
            alpha,
            seed,
            n_folds,
            design,
            non_monotone,
            bootstrap_draws,
            output,
        } => {
            let cfg: Result<SelectT0Config, String> = if let Some(path) = config {
                load_config(&path)
            } else {
                (|| {
                    let input = input.ok_or("missing input path")?;
                    let grid = grid_args.ok_or("missing --t/--t0")?;
                    Ok(SelectT0Config {
                        input,
                        t: grid.t.ok_or("missing --t")?,
                        t0: grid.t0.ok_or("missing --t0")?,
                        t_l,
                        margin,
                        alpha,
                        seed,
                        n_folds,
                        design: parse_design(&design)?,
                        monotone: !non_monotone,
                        bootstrap_draws,
                        output,
                    })
                })()
            };
            match cfg {
                Ok(cfg) => cmd_select_t0(&cfg, &mut err),
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_USAGE
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
