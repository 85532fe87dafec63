//! Command-line front end: dataset ingestion and validation, estimation
//! runs, simulation reproduction, and surrogate-horizon selection, with
//! machine-readable outputs.
//!
//! Wide CSV input format, one row per subject:
//!
//! ```text
//! id,x1..xp,g,a1..at,y1..yt,s1..st0
//! ```
//!
//! Missing entries are empty fields; `g`, `a`, `y` are 0/1; UTF-8 with LF
//! line endings and `.` as the decimal separator. Exit codes: 0 success,
//! 1 domain finding (validation violations), 2 usage or I/O error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    make_folds, validate, LongitudinalDataset, SubjectRecord, TimeGrid,
};
use crate::estimators::estimate_plugin;
use crate::inference::{stepdown_from_ifs, BootstrapOptions, StepdownOptions};
use crate::nuisance::crossfit_nuisances;
use crate::simulation::{
    cached_true_values, derive_seed, run_replications, EstimatorSelection, PlanKind,
    ReplicationConfig, SimulationSetting,
};
use crate::tmle::tmle_estimates;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    /// Usage/IO errors exit 2; pipeline errors also exit 2 (they indicate
    /// the run could not be completed, not a domain finding).
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Wide CSV ingestion and emission
// ---------------------------------------------------------------------------

/// Parse the wide CSV format from a reader.
pub fn read_dataset_csv<R: BufRead>(
    reader: R,
    t: usize,
    t0: usize,
) -> Result<LongitudinalDataset, CliError> {
    let grid = TimeGrid::new(t, t0).map_err(|e| CliError::Config(e.to_string()))?;
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((line, Err(e))) => {
            return Err(CliError::Csv {
                line: line + 1,
                message: e.to_string(),
            })
        }
        None => {
            return Err(CliError::Csv {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let fixed = 2 + 2 * t + t0; // id, g, a1..at, y1..yt, s1..st0
    if columns.len() < fixed + 1 {
        return Err(CliError::Csv {
            line: 1,
            message: format!(
                "expected at least {} columns for t = {t}, t0 = {t0}; found {}",
                fixed + 1,
                columns.len()
            ),
        });
    }
    let p = columns.len() - fixed;
    let mut expected = vec!["id".to_string()];
    expected.extend((1..=p).map(|j| format!("x{j}")));
    expected.push("g".into());
    expected.extend((1..=t).map(|k| format!("a{k}")));
    expected.extend((1..=t).map(|k| format!("y{k}")));
    expected.extend((1..=t0).map(|k| format!("s{k}")));
    for (got, want) in columns.iter().zip(&expected) {
        if got.trim() != want {
            return Err(CliError::Csv {
                line: 1,
                message: format!("header column `{got}` where `{want}` was expected"),
            });
        }
    }

    let mut subjects = Vec::new();
    for (line_idx, line) in lines {
        let line = line.map_err(|e| CliError::Csv {
            line: line_idx + 1,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(CliError::Csv {
                line: line_idx + 1,
                message: format!(
                    "row has {} fields, header has {}",
                    fields.len(),
                    columns.len()
                ),
            });
        }
        let err = |message: String| CliError::Csv {
            line: line_idx + 1,
            message,
        };
        let parse_f64 = |s: &str, what: &str| -> Result<f64, CliError> {
            s.parse::<f64>()
                .map_err(|_| err(format!("invalid {what} value `{s}`")))
        };
        let parse_binary = |s: &str, what: &str| -> Result<bool, CliError> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err(format!("invalid {what} value `{s}` (want 0 or 1)"))),
            }
        };
        let mut pos = 0usize;
        let id = fields[pos].to_string();
        pos += 1;
        let mut x = Vec::with_capacity(p);
        for j in 0..p {
            x.push(parse_f64(fields[pos + j], "covariate")?);
        }
        pos += p;
        let g = u8::from(parse_binary(fields[pos], "g")?);
        pos += 1;
        let mut a = Vec::with_capacity(t);
        for k in 0..t {
            a.push(parse_binary(fields[pos + k], "a")?);
        }
        pos += t;
        let mut y = Vec::with_capacity(t);
        for k in 0..t {
            let f = fields[pos + k];
            y.push(if f.is_empty() {
                None
            } else {
                Some(parse_binary(f, "y")?)
            });
        }
        pos += t;
        let mut s = Vec::with_capacity(t0);
        for k in 0..t0 {
            let f = fields[pos + k];
            s.push(if f.is_empty() {
                None
            } else {
                Some(parse_f64(f, "s")?)
            });
        }
        subjects.push(SubjectRecord { id, x, g, a, y, s });
    }
    Ok(LongitudinalDataset {
        grid,
        subjects,
        covariate_names: (1..=p).map(|j| format!("x{j}")).collect(),
    })
}

pub fn read_dataset_csv_path(
    path: &Path,
    t: usize,
    t0: usize,
) -> Result<LongitudinalDataset, CliError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_dataset_csv(std::io::BufReader::new(file), t, t0)
}

/// Emit the wide CSV format.
pub fn write_dataset_csv<W: Write>(
    dataset: &LongitudinalDataset,
    mut writer: W,
) -> std::io::Result<()> {
    let t = dataset.grid.t();
    let t0 = dataset.grid.t0();
    let p = dataset.n_covariates();
    let mut header = vec!["id".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    header.push("g".into());
    header.extend((1..=t).map(|k| format!("a{k}")));
    header.extend((1..=t).map(|k| format!("y{k}")));
    header.extend((1..=t0).map(|k| format!("s{k}")));
    writeln!(writer, "{}", header.join(","))?;
    for subj in &dataset.subjects {
        let mut fields = vec![subj.id.clone()];
        fields.extend(subj.x.iter().map(|v| format!("{v}")));
        fields.push(format!("{}", subj.g));
        fields.extend(subj.a.iter().map(|&a| format!("{}", u8::from(a))));
        fields.extend(subj.y.iter().map(|y| match y {
            Some(v) => format!("{}", u8::from(*v)),
            None => String::new(),
        }));
        fields.extend(subj.s.iter().map(|s| match s {
            Some(v) => format!("{v}"),
            None => String::new(),
        }));
        writeln!(writer, "{}", fields.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// Full configuration of an estimation run. Round-trips through JSON;
/// unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub t: usize,
    pub t0: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub alpha: f64,
    pub estimators: EstimatorSelection,
    pub design: PlanKind,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub setting: u8,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub n_folds: usize,
    pub alpha: f64,
    pub design: PlanKind,
    pub oracle_n: usize,
    pub oracle_seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectT0Config {
    pub input: PathBuf,
    pub t: usize,
    pub t0: usize,
    /// Latest candidate horizon; candidates are 1..t_l-1 against t_l.
    pub t_l: usize,
    pub margin: f64,
    pub alpha: f64,
    pub seed: u64,
    pub n_folds: usize,
    pub design: PlanKind,
    pub monotone: bool,
    pub bootstrap_draws: Option<usize>,
    pub output: PathBuf,
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Validate a dataset file. Exit 0 when clean, 1 with violations written
/// to `err` as JSON lines, 2 on unreadable or malformed input.
pub fn cmd_validate<W: Write>(path: &Path, t: usize, t0: usize, err: &mut W) -> i32 {
    let dataset = match read_dataset_csv_path(path, t, t0) {
        Ok(ds) => ds,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    let violations = validate(&dataset);
    if violations.is_empty() {
        return EXIT_OK;
    }
    for v in &violations {
        let _ = writeln!(err, "{}", serde_json::to_string(v).expect("serializable"));
    }
    EXIT_DOMAIN
}

#[derive(Debug, Serialize)]
struct TargetJson {
    estimate: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
}

impl TargetJson {
    fn from(e: &crate::estimators::EffectEstimate) -> Self {
        TargetJson {
            estimate: e.value,
            se: e.se,
            ci_lower: e.ci.0,
            ci_upper: e.ci.1,
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimatorJson {
    delta: TargetJson,
    delta_s: TargetJson,
    r: Option<TargetJson>,
    r_undefined_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eif_residual_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eif_residual_delta_s: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EstimateResults {
    config: EstimateConfig,
    n_subjects: usize,
    fold_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plugin: Option<EstimatorJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tmle: Option<EstimatorJson>,
    nuisance_diagnostics: Vec<String>,
}

/// Run the estimation pipeline on a dataset file and write `results.json`.
pub fn cmd_estimate<W: Write>(config: &EstimateConfig, err: &mut W) -> i32 {
    match run_estimate(config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn run_estimate(config: &EstimateConfig) -> Result<(), CliError> {
    let dataset = read_dataset_csv_path(&config.input, config.t, config.t0)?;
    let violations = validate(&dataset);
    if !violations.is_empty() {
        return Err(CliError::Pipeline(format!(
            "dataset has {} validation violations; run `validate` for details",
            violations.len()
        )));
    }
    let folds = make_folds(&dataset, config.n_folds, derive_seed(config.seed, 0xf01d))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let plan = config.design.build(dataset.grid, dataset.n_covariates());
    let nuis = crossfit_nuisances(&dataset, &folds, &plan)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut results = EstimateResults {
        config: config.clone(),
        n_subjects: dataset.n(),
        fold_sizes: (0..config.n_folds)
            .map(|f| folds.fold_indices(f).len())
            .collect(),
        plugin: None,
        tmle: None,
        nuisance_diagnostics: nuis.diagnostics.clone(),
    };
    if config.estimators.plugin {
        let plugin = estimate_plugin(&dataset, &nuis, config.alpha)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        results.plugin = Some(EstimatorJson {
            delta: TargetJson::from(&plugin.delta),
            delta_s: TargetJson::from(&plugin.delta_s),
            r: plugin.r.as_ref().map(TargetJson::from),
            r_undefined_reason: plugin.r_undefined_reason.clone(),
            eif_residual_delta: None,
            eif_residual_delta_s: None,
        });
    }
    if config.estimators.tmle {
        let tm = tmle_estimates(&dataset, &nuis, &plan, config.alpha)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        results.tmle = Some(EstimatorJson {
            delta: TargetJson::from(&tm.delta.estimate),
            delta_s: TargetJson::from(&tm.delta_s.estimate),
            r: tm.r.as_ref().map(TargetJson::from),
            r_undefined_reason: tm.r_undefined_reason.clone(),
            eif_residual_delta: Some(tm.delta.eif_residual),
            eif_residual_delta_s: Some(tm.delta_s.eif_residual),
        });
    }
    write_json(&config.output, &results)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Serialize)]
struct SimulateManifest {
    config: SimulateConfig,
    crate_version: &'static str,
    truth: crate::simulation::TruthValues,
    n_failed: usize,
    censored_fraction_probe: f64,
}

/// Reproduce one benchmark setting: write `table.csv` (one row per target
/// and estimator) and `manifest.json` into the output directory.
pub fn cmd_simulate<W: Write>(config: &SimulateConfig, err: &mut W) -> i32 {
    match run_simulate(config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn run_simulate(config: &SimulateConfig) -> Result<(), CliError> {
    let Some(mut setting) = SimulationSetting::preset(config.setting) else {
        return Err(CliError::Config(format!(
            "unknown setting {} (choose 1, 2, or 3)",
            config.setting
        )));
    };
    setting.n = config.n;
    let truth = cached_true_values(&setting, config.oracle_n, config.oracle_seed, None);
    let rep_config = ReplicationConfig {
        n_folds: config.n_folds,
        alpha: config.alpha,
        estimators: EstimatorSelection::default(),
        plan: config.design,
    };
    let table = run_replications(&setting, config.reps, &rep_config, config.seed, &truth);

    std::fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let table_path = config.output_dir.join("table.csv");
    let mut out = String::new();
    out.push_str("estimator,target,bias,empirical_se,mean_estimated_se,coverage,n_used\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            row.estimator,
            row.target,
            row.bias,
            row.empirical_se,
            row.mean_estimated_se,
            row.coverage,
            row.n_used
        ));
    }
    std::fs::write(&table_path, out).map_err(io_err(&table_path))?;

    // Per-replication audit trail.
    let reps_path = config.output_dir.join("replications.json");
    write_json(&reps_path, &table.records)?;

    let probe = {
        let mut probe_setting = setting.clone();
        probe_setting.n = 20_000;
        crate::simulation::censored_fraction(&crate::simulation::generate_setting(
            &probe_setting,
            derive_seed(config.seed, 0xcf),
        ))
    };
    let manifest = SimulateManifest {
        config: config.clone(),
        crate_version: env!("CARGO_PKG_VERSION"),
        truth,
        n_failed: table.n_failed,
        censored_fraction_probe: probe,
    };
    write_json(&config.output_dir.join("manifest.json"), &manifest)
}

#[derive(Debug, Serialize)]
struct SelectionResults {
    config: SelectT0Config,
    delta: f64,
    r_by_horizon: Vec<(usize, f64)>,
    result: crate::inference::StepdownResult,
}

/// Stepdown selection of the surrogate collection horizon. Per candidate
/// horizon the full nuisance pipeline is re-fit with the surrogate history
/// truncated at that horizon, sharing one fold assignment so the stacked
/// influence functions align by subject.
pub fn cmd_select_t0<W: Write>(config: &SelectT0Config, err: &mut W) -> i32 {
    match run_select_t0(config) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

/// A copy of the dataset with the surrogate history truncated at `horizon`.
pub fn restrict_horizon(
    dataset: &LongitudinalDataset,
    horizon: usize,
) -> Result<LongitudinalDataset, CliError> {
    let grid = TimeGrid::new(dataset.grid.t(), horizon)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let subjects = dataset
        .subjects
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.s.truncate(horizon);
            s
        })
        .collect();
    Ok(LongitudinalDataset {
        grid,
        subjects,
        covariate_names: dataset.covariate_names.clone(),
    })
}

fn run_select_t0(config: &SelectT0Config) -> Result<(), CliError> {
    if !(config.margin > 0.0 && config.margin < 1.0) {
        return Err(CliError::Config(format!(
            "margin {} outside (0, 1)",
            config.margin
        )));
    }
    if config.t_l >= config.t || config.t_l > config.t0 || config.t_l < 2 {
        return Err(CliError::Config(format!(
            "t_l = {} must satisfy 2 <= t_l <= t0 = {} and t_l < t = {}",
            config.t_l, config.t0, config.t
        )));
    }
    if !config.monotone && config.bootstrap_draws.is_none() {
        return Err(CliError::Config(
            "resampling critical values not implemented; pass --bootstrap-draws to enable the \
             multiplier bootstrap or use the monotone procedure"
                .into(),
        ));
    }
    let dataset = read_dataset_csv_path(&config.input, config.t, config.t0)?;
    let violations = validate(&dataset);
    if !violations.is_empty() {
        return Err(CliError::Pipeline(format!(
            "dataset has {} validation violations",
            violations.len()
        )));
    }
    let folds = make_folds(&dataset, config.n_folds, derive_seed(config.seed, 0xf01d))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut phi_s_by_horizon: Vec<Vec<f64>> = Vec::with_capacity(config.t_l);
    let mut phi: Vec<f64> = Vec::new();
    for horizon in 1..=config.t_l {
        let restricted = restrict_horizon(&dataset, horizon)?;
        let plan = config.design.build(restricted.grid, restricted.n_covariates());
        let nuis = crossfit_nuisances(&restricted, &folds, &plan)
            .map_err(|e| CliError::Pipeline(format!("horizon {horizon}: {e}")))?;
        let mut phi_s = Vec::with_capacity(restricted.n());
        for (i, subj) in restricted.subjects.iter().enumerate() {
            phi_s.push(crate::estimators::eval_if_delta_s(subj, &nuis, i));
        }
        if horizon == config.t_l {
            phi = restricted
                .subjects
                .iter()
                .enumerate()
                .map(|(i, subj)| crate::estimators::eval_if_delta(subj, &nuis, i))
                .collect();
        }
        phi_s_by_horizon.push(phi_s);
    }
    let options = StepdownOptions {
        monotone: config.monotone,
        bootstrap: config.bootstrap_draws.map(|n_draws| BootstrapOptions {
            n_draws,
            seed: derive_seed(config.seed, 0xb007),
        }),
    };
    let result = stepdown_from_ifs(
        &phi_s_by_horizon,
        &phi,
        config.margin,
        config.alpha,
        &options,
    )
    .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let n = dataset.n() as f64;
    let delta = phi.iter().sum::<f64>() / n;
    let r_by_horizon = phi_s_by_horizon
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let ds = v.iter().sum::<f64>() / n;
            (idx + 1, 1.0 - ds / delta)
        })
        .collect();
    write_json(
        &config.output,
        &SelectionResults {
            config: config.clone(),
            delta,
            r_by_horizon,
            result,
        },
    )
}
