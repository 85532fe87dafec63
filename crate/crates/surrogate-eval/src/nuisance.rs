//! Fitting of the full nuisance set: treatment propensities, censoring
//! hazards, outcome hazards, and the backward sequential-regression mean
//! functions, with cross-fitted per-subject predictions.
//!
//! Notation used throughout (time `k` runs 1..=t, arm `g` in {0, 1}):
//! * `e(x)`      — P(G = 1 | X = x), fitted on everyone.
//! * `pi_k`      — P(G = 1 | X, Ā_k = Ȳ_k = 1, S̄_k), survivors at `k`,
//!   features include the surrogate through `k`.
//! * `pi*_k`     — same risk set, features only through `k - 1`.
//! * `gamma_gk`  — P(A_k = 1 | X, G = g, Ā_{k-1} = Ȳ_{k-1} = 1, S̄_{k-1}).
//! * `mu_gk`     — E(Y_k | X, G = g, Ā_k = Ȳ_{k-1} = 1, S̄_{k-1}).
//! * `Q_gk`      — backward recursion E{mu_{gk+1} Q_{gk+1} | arm-g
//!   survivors at k}; for `k > t0` a deterministic product of hazards along
//!   the frozen surrogate history.
//! * `Q*_gk`     — same recursion with the conditioning pooled over arms,
//!   which encodes the common reference surrogate distribution; equal to
//!   `Q_gk` for `k > t0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldAssignment, LongitudinalDataset, SubjectRecord, TimeGrid};
use crate::learners::{clamp_prob, fit_logistic, DesignSpec, FitRow, FittedModel, LearnerError};

/// Risk sets smaller than this fall back to a clamped empirical mean.
const MIN_RISK_SET: usize = 5;

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("empty risk set for {family} at k = {k} (arm {arm:?})")]
    EmptyRiskSet {
        family: &'static str,
        k: usize,
        arm: Option<u8>,
    },
    #[error("both treatment arms must be present in the training split")]
    MissingArm,
    #[error("non-finite pseudo-outcome in {family} at (g = {g}, k = {k})")]
    NonFinitePseudoOutcome {
        family: &'static str,
        g: u8,
        k: usize,
    },
    #[error("fold {fold}: {source}")]
    FoldFit {
        fold: usize,
        #[source]
        source: Box<NuisanceError>,
    },
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Design specifications per nuisance family and time index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialPlan {
    pub grid: TimeGrid,
    /// e(x): features over X only.
    pub propensity: DesignSpec,
    /// pi_k, k = 1..=t0 (features X, S̄_k).
    pub pi: Vec<DesignSpec>,
    /// pi*_k, k = 1..=t0 (features X, S̄_{k-1}).
    pub pi_star: Vec<DesignSpec>,
    /// gamma_gk, k = 1..=t (features X, S̄_{k-1}).
    pub censoring: Vec<DesignSpec>,
    /// mu_gk, k = 1..=t (features X, S̄_{k-1}).
    pub hazard: Vec<DesignSpec>,
    /// Q_gk regressions, k = 1..=t0 (features X, S̄_{k-1}).
    pub q: Vec<DesignSpec>,
    /// Q*_gk pooled regressions, k = 1..=t0 (features X, S̄_{k-1}).
    pub q_star: Vec<DesignSpec>,
}

impl SequentialPlan {
    /// Main-effects designs for every family.
    pub fn main_effects(grid: TimeGrid, n_covariates: usize) -> Self {
        let spec = |lags: usize| DesignSpec::main_effects(n_covariates, lags);
        SequentialPlan {
            grid,
            propensity: spec(0),
            pi: (1..=grid.t0()).map(|k| spec(k.min(grid.t0()))).collect(),
            pi_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            censoring: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            hazard: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            q: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            q_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
        }
    }

    /// Main effects of the covariates and the most recent surrogate only.
    ///
    /// Correctly specified whenever the hazards and surrogate transitions
    /// are first-order Markov in the surrogate, and far less prone to
    /// extrapolation noise in small risk sets than the full-history design;
    /// the default for the simulation harness.
    pub fn markov(grid: TimeGrid, n_covariates: usize) -> Self {
        let spec = |lags: usize| DesignSpec {
            n_covariates,
            n_surrogate_lags: lags.min(1),
            interactions: false,
            quadratic: false,
            saturated: false,
        };
        SequentialPlan {
            grid,
            propensity: spec(0),
            pi: (1..=grid.t0()).map(|k| spec(k.min(grid.t0()))).collect(),
            pi_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            censoring: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            hazard: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            q: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            q_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
        }
    }

    /// Fully saturated designs; with discrete inputs every fit reduces to
    /// empirical cell means.
    pub fn saturated(grid: TimeGrid, n_covariates: usize) -> Self {
        let spec = |lags: usize| DesignSpec::saturated(n_covariates, lags);
        SequentialPlan {
            grid,
            propensity: spec(0),
            pi: (1..=grid.t0()).map(|k| spec(k.min(grid.t0()))).collect(),
            pi_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            censoring: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            hazard: (1..=grid.t()).map(|k| spec(grid.lag_at(k))).collect(),
            q: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
            q_star: (1..=grid.t0()).map(|k| spec(grid.lag_at(k))).collect(),
        }
    }
}

/// One fitted coefficient vector, for the diagnostic JSON dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub family: String,
    pub g: Option<u8>,
    pub k: usize,
    pub fold: usize,
    pub coefficients: Vec<f64>,
    pub converged: bool,
}

/// Per-subject, per-time nuisance predictions.
///
/// Vectors are indexed `[k - 1][subject]`; entries are `NaN` wherever the
/// conditioning history is unobserved for that subject. Every evaluation
/// routine truncates its products before touching such entries.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub grid: TimeGrid,
    pub n: usize,
    pub e: Vec<f64>,
    /// `pi[k-1][i]`, k = 1..=t0.
    pub pi: Vec<Vec<f64>>,
    /// `pi_star[k-1][i]`, k = 1..=t0.
    pub pi_star: Vec<Vec<f64>>,
    /// `gamma[g][k-1][i]`, k = 1..=t.
    pub gamma: [Vec<Vec<f64>>; 2],
    /// `mu[g][k-1][i]`, k = 1..=t.
    pub mu: [Vec<Vec<f64>>; 2],
    /// `q[g][k-1][i]`, k = 1..=t (Q_{gt} = 1 handled by the accessor).
    pub q: [Vec<Vec<f64>>; 2],
    /// `q_star[g][k-1][i]`.
    pub q_star: [Vec<Vec<f64>>; 2],
    /// Fold that each subject belongs to (its predictions come from models
    /// fitted on the complement). Empty when fitted in-sample.
    pub provenance: Vec<usize>,
    pub diagnostics: Vec<String>,
    pub coefficient_log: Vec<CoefficientRecord>,
}

impl NuisanceSet {
    fn empty(grid: TimeGrid, n: usize) -> Self {
        let t = grid.t();
        let t0 = grid.t0();
        let layer = |count: usize| vec![vec![f64::NAN; n]; count];
        NuisanceSet {
            grid,
            n,
            e: vec![f64::NAN; n],
            pi: layer(t0),
            pi_star: layer(t0),
            gamma: [layer(t), layer(t)],
            mu: [layer(t), layer(t)],
            q: [layer(t), layer(t)],
            q_star: [layer(t), layer(t)],
            provenance: Vec::new(),
            diagnostics: Vec::new(),
            coefficient_log: Vec::new(),
        }
    }

    /// pi_k for j > t0 is 1 by convention.
    pub fn pi_at(&self, k: usize, i: usize) -> f64 {
        if k == 0 || k > self.grid.t0() {
            1.0
        } else {
            self.pi[k - 1][i]
        }
    }

    pub fn pi_star_at(&self, k: usize, i: usize) -> f64 {
        if k == 0 || k > self.grid.t0() {
            1.0
        } else {
            self.pi_star[k - 1][i]
        }
    }

    /// Arm-adjusted pi_{gk} = pi_k^g (1 - pi_k)^{1-g}. At the boundary
    /// indices (k = 0 or k > t0) the convention pi_{gk} = 1 holds for both
    /// arms: the ratio weights collapse rather than the arm-1 probability.
    pub fn pi_arm_at(&self, g: u8, k: usize, i: usize) -> f64 {
        if k == 0 || k > self.grid.t0() {
            1.0
        } else if g == 1 {
            self.pi[k - 1][i]
        } else {
            1.0 - self.pi[k - 1][i]
        }
    }

    /// Arm-adjusted pi*_{gk}; same boundary convention as [`Self::pi_arm_at`].
    pub fn pi_star_arm_at(&self, g: u8, k: usize, i: usize) -> f64 {
        if k == 0 || k > self.grid.t0() {
            1.0
        } else if g == 1 {
            self.pi_star[k - 1][i]
        } else {
            1.0 - self.pi_star[k - 1][i]
        }
    }

    pub fn gamma_at(&self, g: u8, k: usize, i: usize) -> f64 {
        self.gamma[g as usize][k - 1][i]
    }

    pub fn mu_at(&self, g: u8, k: usize, i: usize) -> f64 {
        self.mu[g as usize][k - 1][i]
    }

    /// Q_{gk}; `k = t` is the boundary value 1 only at `k = t + 1`.
    pub fn q_at(&self, g: u8, k: usize, i: usize) -> f64 {
        if k > self.grid.t() {
            1.0
        } else {
            self.q[g as usize][k - 1][i]
        }
    }

    pub fn q_star_at(&self, g: u8, k: usize, i: usize) -> f64 {
        if k > self.grid.t() {
            1.0
        } else {
            self.q_star[g as usize][k - 1][i]
        }
    }

    /// JSON dump of every fitted coefficient vector.
    pub fn coefficients_json(&self) -> String {
        serde_json::to_string_pretty(&self.coefficient_log).expect("serializable")
    }
}

/// The fitted model bundles for one training split.
#[derive(Debug, Clone)]
pub struct PropensityModels {
    pub e: FittedModel,
    pub pi: Vec<FittedModel>,
    pub pi_star: Vec<FittedModel>,
}

#[derive(Debug, Clone)]
pub struct CensoringModels {
    /// `[g][k-1]`.
    pub gamma: [Vec<FittedModel>; 2],
}

#[derive(Debug, Clone)]
pub struct HazardModels {
    pub mu: [Vec<FittedModel>; 2],
}

#[derive(Debug, Clone)]
pub struct QModels {
    /// Regressions for k = 1..=t0 (`[g][k-1]`); k > t0 is a product of
    /// hazards, not a model.
    pub q: [Vec<FittedModel>; 2],
}

#[derive(Debug, Clone)]
pub struct QStarModels {
    pub q_star: [Vec<FittedModel>; 2],
}

/// Collects fit-fallback diagnostics during one split's training.
#[derive(Debug, Default)]
struct FitLog {
    diagnostics: Vec<String>,
    records: Vec<CoefficientRecord>,
}

impl FitLog {
    fn record(&mut self, family: &str, g: Option<u8>, k: usize, model: &FittedModel) {
        self.records.push(CoefficientRecord {
            family: family.to_string(),
            g,
            k,
            fold: usize::MAX, // patched by the cross-fitting driver
            coefficients: model.coefficients.clone(),
            converged: model.converged,
        });
    }
}

/// Weighted logistic fit with the degenerate-cell fallback: fewer than
/// [`MIN_RISK_SET`] informative rows, or an outcome that never varies,
/// yields an intercept-only model at the clamped weighted mean.
fn fit_or_fallback(
    rows: &[FitRow],
    design: &DesignSpec,
    log: &mut FitLog,
    context: &str,
) -> Result<FittedModel, NuisanceError> {
    let informative = rows.iter().filter(|r| r.weight > 0.0).count();
    let (mut w_sum, mut wy_sum) = (0.0, 0.0);
    for r in rows {
        w_sum += r.weight;
        wy_sum += r.weight * r.outcome;
    }
    let mean = if w_sum > 0.0 { wy_sum / w_sum } else { 0.5 };
    let degenerate = informative < MIN_RISK_SET
        || rows
            .iter()
            .filter(|r| r.weight > 0.0)
            .all(|r| (r.outcome - mean).abs() < 1e-12);
    if degenerate {
        log.diagnostics.push(format!(
            "{context}: degenerate risk set ({informative} informative rows); using clamped mean {:.6}",
            clamp_prob(mean)
        ));
        let mut coefficients = vec![0.0; design.n_features()];
        coefficients[0] = crate::learners::logit(clamp_prob(mean)).expect("clamped");
        return Ok(FittedModel {
            coefficients,
            design: design.clone(),
            converged: true,
            n_iterations: 0,
        });
    }
    Ok(fit_logistic(rows, design.clone())?)
}

fn subject_features(design: &DesignSpec, subj: &SubjectRecord, lags: usize) -> Vec<f64> {
    design.features(&subj.x, &subj.s_hist(lags))
}

/// Fit e, pi_k, and pi*_k on the training indices.
pub fn fit_propensities(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
) -> Result<PropensityModels, NuisanceError> {
    fit_propensities_logged(dataset, train, plan, &mut FitLog::default())
}

fn fit_propensities_logged(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    log: &mut FitLog,
) -> Result<PropensityModels, NuisanceError> {
    let grid = plan.grid;
    let has = |g: u8| train.iter().any(|&i| dataset.subjects[i].g == g);
    if !has(0) || !has(1) {
        return Err(NuisanceError::MissingArm);
    }
    let e_rows: Vec<FitRow> = train
        .iter()
        .map(|&i| {
            let subj = &dataset.subjects[i];
            FitRow {
                features: subject_features(&plan.propensity, subj, 0),
                outcome: subj.g as f64,
                weight: 1.0,
                offset: 0.0,
            }
        })
        .collect();
    let e = fit_or_fallback(&e_rows, &plan.propensity, log, "e")?;
    log.record("e", None, 0, &e);

    let mut pi = Vec::with_capacity(grid.t0());
    let mut pi_star = Vec::with_capacity(grid.t0());
    for k in 1..=grid.t0() {
        // Survivors at k: Ā_k = Ȳ_k = 1.
        let members: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| {
                let s = &dataset.subjects[i];
                s.uncensored_through(k) && s.survived_through(k)
            })
            .collect();
        if members.is_empty() {
            return Err(NuisanceError::EmptyRiskSet {
                family: "pi",
                k,
                arm: None,
            });
        }
        let pi_rows: Vec<FitRow> = members
            .iter()
            .map(|&i| {
                let subj = &dataset.subjects[i];
                FitRow {
                    features: subject_features(&plan.pi[k - 1], subj, k.min(grid.t0())),
                    outcome: subj.g as f64,
                    weight: 1.0,
                    offset: 0.0,
                }
            })
            .collect();
        let m = fit_or_fallback(&pi_rows, &plan.pi[k - 1], log, &format!("pi_{k}"))?;
        log.record("pi", None, k, &m);
        pi.push(m);

        let pi_star_rows: Vec<FitRow> = members
            .iter()
            .map(|&i| {
                let subj = &dataset.subjects[i];
                FitRow {
                    features: subject_features(&plan.pi_star[k - 1], subj, grid.lag_at(k)),
                    outcome: subj.g as f64,
                    weight: 1.0,
                    offset: 0.0,
                }
            })
            .collect();
        let m = fit_or_fallback(&pi_star_rows, &plan.pi_star[k - 1], log, &format!("pi*_{k}"))?;
        log.record("pi_star", None, k, &m);
        pi_star.push(m);
    }
    Ok(PropensityModels { e, pi, pi_star })
}

/// Fit the per-arm, per-time censoring retention models gamma_gk.
pub fn fit_censoring(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
) -> Result<CensoringModels, NuisanceError> {
    fit_censoring_logged(dataset, train, plan, &mut FitLog::default())
}

fn fit_censoring_logged(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    log: &mut FitLog,
) -> Result<CensoringModels, NuisanceError> {
    let grid = plan.grid;
    let mut gamma = [Vec::new(), Vec::new()];
    for g in [0u8, 1u8] {
        for k in 1..=grid.t() {
            let members: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| {
                    let s = &dataset.subjects[i];
                    s.g == g && s.at_risk_censoring(k)
                })
                .collect();
            if members.is_empty() {
                return Err(NuisanceError::EmptyRiskSet {
                    family: "gamma",
                    k,
                    arm: Some(g),
                });
            }
            let rows: Vec<FitRow> = members
                .iter()
                .map(|&i| {
                    let subj = &dataset.subjects[i];
                    FitRow {
                        features: subject_features(&plan.censoring[k - 1], subj, grid.lag_at(k)),
                        outcome: f64::from(subj.a[k - 1]),
                        weight: 1.0,
                        offset: 0.0,
                    }
                })
                .collect();
            let m = fit_or_fallback(&rows, &plan.censoring[k - 1], log, &format!("gamma_{g}{k}"))?;
            log.record("gamma", Some(g), k, &m);
            gamma[g as usize].push(m);
        }
    }
    Ok(CensoringModels { gamma })
}

/// Fit the per-arm discrete survival hazards mu_gk.
pub fn fit_hazards(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
) -> Result<HazardModels, NuisanceError> {
    fit_hazards_logged(dataset, train, plan, &mut FitLog::default())
}

fn fit_hazards_logged(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    log: &mut FitLog,
) -> Result<HazardModels, NuisanceError> {
    let grid = plan.grid;
    let mut mu = [Vec::new(), Vec::new()];
    for g in [0u8, 1u8] {
        for k in 1..=grid.t() {
            let members: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| {
                    let s = &dataset.subjects[i];
                    s.g == g && s.at_risk_hazard(k)
                })
                .collect();
            if members.is_empty() {
                return Err(NuisanceError::EmptyRiskSet {
                    family: "mu",
                    k,
                    arm: Some(g),
                });
            }
            let rows: Vec<FitRow> = members
                .iter()
                .map(|&i| {
                    let subj = &dataset.subjects[i];
                    FitRow {
                        features: subject_features(&plan.hazard[k - 1], subj, grid.lag_at(k)),
                        outcome: subj.y_at(k),
                        weight: 1.0,
                        offset: 0.0,
                    }
                })
                .collect();
            let m = fit_or_fallback(&rows, &plan.hazard[k - 1], log, &format!("mu_{g}{k}"))?;
            log.record("mu", Some(g), k, &m);
            mu[g as usize].push(m);
        }
    }
    Ok(HazardModels { mu })
}

/// Hazard prediction for one subject at time `k` (arm `g` counterfactual).
fn mu_pred(
    models: &HazardModels,
    plan: &SequentialPlan,
    subj: &SubjectRecord,
    g: u8,
    k: usize,
) -> f64 {
    models.mu[g as usize][k - 1]
        .predict(&subj.x, &subj.s_hist(plan.grid.lag_at(k)))
        .expect("hazard feature dimensions fixed by plan")
}

/// Deterministic product of fitted hazards: Q_{gk} for k >= t0 + 1 equals
/// prod_{j=k+1}^{t} mu_gj along the frozen surrogate history.
fn q_product(
    models: &HazardModels,
    plan: &SequentialPlan,
    subj: &SubjectRecord,
    g: u8,
    k: usize,
) -> f64 {
    let t = plan.grid.t();
    let mut value = 1.0;
    for j in (k + 1)..=t {
        value *= mu_pred(models, plan, subj, g, j);
    }
    value
}

/// Fit the within-arm sequential regressions Q_{gk}, k = t0..1 (backward).
///
/// The pseudo-outcome at step `k` is `mu_{gk+1} * Q_{gk+1}` evaluated per
/// training subject; the regression runs among arm-g survivors at `k`
/// (Ā_k = Ȳ_k = 1), whose surrogate history through `k` is observed.
pub fn fit_q_sequential(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    hazards: &HazardModels,
) -> Result<QModels, NuisanceError> {
    fit_q_sequential_logged(dataset, train, plan, hazards, &mut FitLog::default())
}

fn fit_q_sequential_logged(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    hazards: &HazardModels,
    log: &mut FitLog,
) -> Result<QModels, NuisanceError> {
    let grid = plan.grid;
    let t0 = grid.t0();
    let mut q: [Vec<FittedModel>; 2] = [
        Vec::with_capacity(t0),
        Vec::with_capacity(t0),
    ];
    for g in [0u8, 1u8] {
        let mut models_rev: Vec<FittedModel> = Vec::with_capacity(t0);
        // Q values at step k+1 for each training subject, maintained along
        // the backward recursion; NaN when unobservable.
        let mut next_q: Vec<f64> = train
            .iter()
            .map(|&i| {
                let subj = &dataset.subjects[i];
                if subj.uncensored_through(t0) && subj.survived_through(t0) {
                    q_product(hazards, plan, subj, g, t0 + 1)
                } else {
                    f64::NAN
                }
            })
            .collect();
        for k in (1..=t0).rev() {
            let mut rows = Vec::new();
            for (pos, &i) in train.iter().enumerate() {
                let subj = &dataset.subjects[i];
                if !(subj.uncensored_through(k) && subj.survived_through(k)) {
                    continue;
                }
                if subj.g != g {
                    continue;
                }
                let pseudo = mu_pred(hazards, plan, subj, g, k + 1) * next_q[pos];
                if !pseudo.is_finite() {
                    return Err(NuisanceError::NonFinitePseudoOutcome {
                        family: "Q",
                        g,
                        k,
                    });
                }
                rows.push(FitRow {
                    features: subject_features(&plan.q[k - 1], subj, grid.lag_at(k)),
                    outcome: pseudo.clamp(0.0, 1.0),
                    weight: 1.0,
                    offset: 0.0,
                });
            }
            if rows.is_empty() {
                return Err(NuisanceError::EmptyRiskSet {
                    family: "Q",
                    k,
                    arm: Some(g),
                });
            }
            let model = fit_or_fallback(&rows, &plan.q[k - 1], log, &format!("Q_{g}{k}"))?;
            log.record("Q", Some(g), k, &model);
            // Update next_q to the current step's predictions for the next
            // (earlier) recursion step.
            for (pos, &i) in train.iter().enumerate() {
                let subj = &dataset.subjects[i];
                next_q[pos] = if subj.uncensored_through(k - 1) && subj.survived_through(k - 1) {
                    model
                        .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                        .expect("dimensions fixed")
                } else {
                    f64::NAN
                };
            }
            models_rev.push(model);
        }
        models_rev.reverse();
        q[g as usize] = models_rev;
    }
    Ok(QModels { q })
}

/// Fit the pooled-arm sequential regressions Q*_{gk}, k = t0..1.
///
/// Identical recursion, but each regression pools both treatment arms
/// (separately per pseudo-outcome arm `g`): the conditioning set carries no
/// G, which is what standardizes the surrogate distribution.
pub fn fit_qstar_sequential(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    hazards: &HazardModels,
) -> Result<QStarModels, NuisanceError> {
    fit_qstar_sequential_logged(dataset, train, plan, hazards, &mut FitLog::default())
}

fn fit_qstar_sequential_logged(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    hazards: &HazardModels,
    log: &mut FitLog,
) -> Result<QStarModels, NuisanceError> {
    let grid = plan.grid;
    let t0 = grid.t0();
    let mut q_star: [Vec<FittedModel>; 2] = [
        Vec::with_capacity(t0),
        Vec::with_capacity(t0),
    ];
    for g in [0u8, 1u8] {
        let mut models_rev: Vec<FittedModel> = Vec::with_capacity(t0);
        let mut next_q: Vec<f64> = train
            .iter()
            .map(|&i| {
                let subj = &dataset.subjects[i];
                if subj.uncensored_through(t0) && subj.survived_through(t0) {
                    q_product(hazards, plan, subj, g, t0 + 1)
                } else {
                    f64::NAN
                }
            })
            .collect();
        for k in (1..=t0).rev() {
            let mut rows = Vec::new();
            for (pos, &i) in train.iter().enumerate() {
                let subj = &dataset.subjects[i];
                if !(subj.uncensored_through(k) && subj.survived_through(k)) {
                    continue;
                }
                let pseudo = mu_pred(hazards, plan, subj, g, k + 1) * next_q[pos];
                if !pseudo.is_finite() {
                    return Err(NuisanceError::NonFinitePseudoOutcome {
                        family: "Q*",
                        g,
                        k,
                    });
                }
                rows.push(FitRow {
                    features: subject_features(&plan.q_star[k - 1], subj, grid.lag_at(k)),
                    outcome: pseudo.clamp(0.0, 1.0),
                    weight: 1.0,
                    offset: 0.0,
                });
            }
            if rows.is_empty() {
                return Err(NuisanceError::EmptyRiskSet {
                    family: "Q*",
                    k,
                    arm: None,
                });
            }
            let model = fit_or_fallback(&rows, &plan.q_star[k - 1], log, &format!("Q*_{g}{k}"))?;
            log.record("Q_star", Some(g), k, &model);
            for (pos, &i) in train.iter().enumerate() {
                let subj = &dataset.subjects[i];
                next_q[pos] = if subj.uncensored_through(k - 1) && subj.survived_through(k - 1) {
                    model
                        .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                        .expect("dimensions fixed")
                } else {
                    f64::NAN
                };
            }
            models_rev.push(model);
        }
        models_rev.reverse();
        q_star[g as usize] = models_rev;
    }
    Ok(QStarModels { q_star })
}

/// All model bundles for one training split.
#[derive(Debug, Clone)]
pub struct SplitModels {
    pub propensities: PropensityModels,
    pub censoring: CensoringModels,
    pub hazards: HazardModels,
    pub q: QModels,
    pub q_star: QStarModels,
}

fn fit_split(
    dataset: &LongitudinalDataset,
    train: &[usize],
    plan: &SequentialPlan,
    log: &mut FitLog,
) -> Result<SplitModels, NuisanceError> {
    let propensities = fit_propensities_logged(dataset, train, plan, log)?;
    let censoring = fit_censoring_logged(dataset, train, plan, log)?;
    let hazards = fit_hazards_logged(dataset, train, plan, log)?;
    let q = fit_q_sequential_logged(dataset, train, plan, &hazards, log)?;
    let q_star = fit_qstar_sequential_logged(dataset, train, plan, &hazards, log)?;
    Ok(SplitModels {
        propensities,
        censoring,
        hazards,
        q,
        q_star,
    })
}

/// Evaluate one split's models on the given subjects, writing into `out`.
fn predict_into(
    dataset: &LongitudinalDataset,
    eval: &[usize],
    plan: &SequentialPlan,
    models: &SplitModels,
    out: &mut NuisanceSet,
) {
    let grid = plan.grid;
    let t = grid.t();
    let t0 = grid.t0();
    for &i in eval {
        let subj = &dataset.subjects[i];
        out.e[i] = models
            .propensities
            .e
            .predict(&subj.x, &[])
            .expect("propensity features");
        // Predictions are defined while the conditioning history is
        // observed: features at time k need S̄ through lag_at(k).
        for k in 1..=t {
            if !(subj.uncensored_through(k - 1) && subj.survived_through(k - 1)) {
                break;
            }
            out.gamma[0][k - 1][i] = models.censoring.gamma[0][k - 1]
                .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                .expect("gamma features");
            out.gamma[1][k - 1][i] = models.censoring.gamma[1][k - 1]
                .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                .expect("gamma features");
            for g in [0u8, 1u8] {
                out.mu[g as usize][k - 1][i] = mu_pred(&models.hazards, plan, subj, g, k);
                let (qv, qsv) = if k > t0 {
                    let v = q_product(&models.hazards, plan, subj, g, k);
                    (v, v)
                } else {
                    (
                        models.q.q[g as usize][k - 1]
                            .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                            .expect("Q features"),
                        models.q_star.q_star[g as usize][k - 1]
                            .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                            .expect("Q* features"),
                    )
                };
                out.q[g as usize][k - 1][i] = qv;
                out.q_star[g as usize][k - 1][i] = qsv;
            }
        }
        for k in 1..=t0 {
            // pi_k conditions on surviving k, so its features need S̄_k.
            if subj.uncensored_through(k) && subj.survived_through(k) {
                out.pi[k - 1][i] = models.propensities.pi[k - 1]
                    .predict(&subj.x, &subj.s_hist(k.min(t0)))
                    .expect("pi features");
            }
            if subj.uncensored_through(k - 1) && subj.survived_through(k - 1) {
                out.pi_star[k - 1][i] = models.propensities.pi_star[k - 1]
                    .predict(&subj.x, &subj.s_hist(grid.lag_at(k)))
                    .expect("pi* features");
            }
        }
    }
}

/// Cross-fit every nuisance family: for each fold, fit on the complement
/// and predict for the held-out subjects. Two runs with identical inputs
/// produce identical output.
pub fn crossfit_nuisances(
    dataset: &LongitudinalDataset,
    folds: &FoldAssignment,
    plan: &SequentialPlan,
) -> Result<NuisanceSet, NuisanceError> {
    let mut out = NuisanceSet::empty(plan.grid, dataset.n());
    out.provenance = folds.fold_of.clone();
    for fold in 0..folds.n_folds {
        let train = folds.complement_indices(fold);
        let eval = folds.fold_indices(fold);
        let mut log = FitLog::default();
        let models = fit_split(dataset, &train, plan, &mut log).map_err(|e| {
            NuisanceError::FoldFit {
                fold,
                source: Box::new(e),
            }
        })?;
        for rec in &mut log.records {
            rec.fold = fold;
        }
        out.diagnostics
            .extend(log.diagnostics.drain(..).map(|d| format!("fold {fold}: {d}")));
        out.coefficient_log.append(&mut log.records);
        predict_into(dataset, &eval, plan, &models, &mut out);
    }
    Ok(out)
}

/// Fit on the whole sample and predict for everyone. Used by the targeting
/// sweep's sequential regressions and by exactness tests on saturated
/// designs; cross-fitted estimation should use [`crossfit_nuisances`].
pub fn fit_nuisances_insample(
    dataset: &LongitudinalDataset,
    plan: &SequentialPlan,
) -> Result<NuisanceSet, NuisanceError> {
    let all: Vec<usize> = (0..dataset.n()).collect();
    let mut log = FitLog::default();
    let models = fit_split(dataset, &all, plan, &mut log)?;
    let mut out = NuisanceSet::empty(plan.grid, dataset.n());
    for rec in &mut log.records {
        rec.fold = 0;
    }
    out.diagnostics = log.diagnostics;
    out.coefficient_log = log.records;
    predict_into(dataset, &all, plan, &models, &mut out);
    Ok(out)
}

/// Closed-form nuisance functions, for tests that inject analytic truths.
pub trait NuisanceOracle {
    fn e(&self, x: &[f64]) -> f64;
    fn gamma(&self, g: u8, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
    fn mu(&self, g: u8, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
    fn q(&self, g: u8, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
    fn q_star(&self, g: u8, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
    /// pi_k takes the history through k; pi*_k through k - 1.
    fn pi(&self, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
    fn pi_star(&self, k: usize, x: &[f64], s_hist: &[f64]) -> f64;
}

/// Materialize per-subject predictions from closed-form nuisances.
pub fn evaluate_oracle(
    dataset: &LongitudinalDataset,
    grid: TimeGrid,
    oracle: &dyn NuisanceOracle,
) -> NuisanceSet {
    let mut out = NuisanceSet::empty(grid, dataset.n());
    let t = grid.t();
    let t0 = grid.t0();
    for (i, subj) in dataset.subjects.iter().enumerate() {
        out.e[i] = oracle.e(&subj.x);
        for k in 1..=t {
            if !(subj.uncensored_through(k - 1) && subj.survived_through(k - 1)) {
                break;
            }
            let hist = subj.s_hist(grid.lag_at(k));
            for g in [0u8, 1u8] {
                out.gamma[g as usize][k - 1][i] = oracle.gamma(g, k, &subj.x, &hist);
                out.mu[g as usize][k - 1][i] = oracle.mu(g, k, &subj.x, &hist);
                out.q[g as usize][k - 1][i] = oracle.q(g, k, &subj.x, &hist);
                out.q_star[g as usize][k - 1][i] = oracle.q_star(g, k, &subj.x, &hist);
            }
        }
        for k in 1..=t0 {
            if subj.uncensored_through(k) && subj.survived_through(k) {
                out.pi[k - 1][i] = oracle.pi(k, &subj.x, &subj.s_hist(k));
            }
            if subj.uncensored_through(k - 1) && subj.survived_through(k - 1) {
                out.pi_star[k - 1][i] = oracle.pi_star(k, &subj.x, &subj.s_hist(grid.lag_at(k)));
            }
        }
    }
    out
}
