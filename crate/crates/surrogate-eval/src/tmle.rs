//! Targeted minimum loss-based estimation of the overall and residual
//! treatment effects via backward iterative logistic tilting.
//!
//! The sweep runs k = t..1. At each step the current pseudo-outcome is
//! regressed on (X, surrogate history) to initialize the sequential mean,
//! and an intercept-only weighted logistic regression with the initial
//! value as offset tilts it so the corresponding influence-function score
//! term is solved exactly. For the residual effect, steps at or before the
//! surrogate horizon run two stages: a pooled-arm tilt of the reference
//! mean followed by the within-arm hazard tilt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LongitudinalDataset;
use crate::estimators::{
    eval_if_delta, eval_if_delta_s, r_estimate, EffectEstimate, EstimatorError, Target,
};
use crate::inference::{normal_quantile, variance_from_if};
use crate::learners::{clamp_prob, expit, fit_logistic, logit, DesignSpec, FitRow};
use crate::nuisance::{NuisanceSet, SequentialPlan};

/// Bound on each tilting intercept; prevents runaway drift under degenerate
/// weight or outcome configurations.
pub const EPSILON_BOUND: f64 = 10.0;

/// Absolute tolerance on the tilting score equation.
pub const TILT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TmleError {
    #[error("tilt inputs have mismatched lengths")]
    LengthMismatch,
    #[error("regression failed at (g = {g}, k = {k}): {source}")]
    Regression {
        g: u8,
        k: usize,
        #[source]
        source: crate::learners::LearnerError,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
}

/// Inverse-probability clever weights for one (arm, time) pair.
///
/// Every variant is zero once the subject has left the risk set before `j`,
/// and finite under the probability clamping policy.
#[derive(Debug, Clone)]
pub struct CleverWeights {
    pub values: Vec<f64>,
}

impl CleverWeights {
    /// H_{gj} for the overall-effect tilt: `I{G = g}/e_g *
    /// prod_{k<j}(A_k Y_k / gamma_gk) * A_j / gamma_gj`.
    pub fn delta(dataset: &LongitudinalDataset, nuis: &NuisanceSet, g: u8, j: usize) -> Self {
        let values = dataset
            .subjects
            .iter()
            .enumerate()
            .map(|(i, subj)| {
                if subj.g != g || !subj.at_risk_hazard(j) {
                    return 0.0;
                }
                let e_g = if g == 1 { nuis.e[i] } else { 1.0 - nuis.e[i] };
                let mut cum = 1.0;
                for m in 1..j {
                    cum /= nuis.gamma_at(g, m, i);
                }
                cum / (e_g * nuis.gamma_at(g, j, i))
            })
            .collect();
        CleverWeights { values }
    }

    /// H*_{Ygj} for the residual-effect hazard tilt: the censoring weights
    /// additionally carry the arm-adjusted `pi*_{k-1}/pi_{k-1}` ratios.
    pub fn delta_s_hazard(
        dataset: &LongitudinalDataset,
        nuis: &NuisanceSet,
        g: u8,
        j: usize,
    ) -> Self {
        let values = dataset
            .subjects
            .iter()
            .enumerate()
            .map(|(i, subj)| {
                if subj.g != g || !subj.at_risk_hazard(j) {
                    return 0.0;
                }
                let e_g = if g == 1 { nuis.e[i] } else { 1.0 - nuis.e[i] };
                let mut cum = 1.0;
                for m in 1..j {
                    cum *= nuis.pi_star_arm_at(g, m - 1, i)
                        / (nuis.pi_arm_at(g, m - 1, i) * nuis.gamma_at(g, m, i));
                }
                cum * nuis.pi_star_arm_at(g, j - 1, i)
                    / (e_g * nuis.pi_arm_at(g, j - 1, i) * nuis.gamma_at(g, j, i))
            })
            .collect();
        CleverWeights { values }
    }

    /// H*_{Sgj} for the pooled surrogate-distribution tilt. No treatment
    /// indicator: survivors of `j` in both arms carry weight.
    pub fn delta_s_surrogate(
        dataset: &LongitudinalDataset,
        nuis: &NuisanceSet,
        g: u8,
        j: usize,
    ) -> Self {
        let values = dataset
            .subjects
            .iter()
            .enumerate()
            .map(|(i, subj)| {
                if !(subj.uncensored_through(j) && subj.survived_through(j)) {
                    return 0.0;
                }
                let e_g = if g == 1 { nuis.e[i] } else { 1.0 - nuis.e[i] };
                let mut cum = 1.0;
                for m in 1..=j {
                    cum *= nuis.pi_star_arm_at(g, m - 1, i)
                        / (nuis.pi_arm_at(g, m - 1, i) * nuis.gamma_at(g, m, i));
                }
                cum * nuis.pi_star_arm_at(g, j, i) / e_g
            })
            .collect();
        CleverWeights { values }
    }
}

/// Solve the intercept-only weighted logistic tilt.
///
/// Finds the `epsilon` (within `[-EPSILON_BOUND, EPSILON_BOUND]`) solving
/// `sum_i w_i (y_i - expit(logit(q_i) + epsilon)) = 0` and returns it with
/// the updated values for every row, zero-weight rows included. All-zero
/// weights leave the values untouched.
pub fn tilt_step(
    initial: &[f64],
    outcomes: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>), TmleError> {
    if initial.len() != outcomes.len() || initial.len() != weights.len() {
        return Err(TmleError::LengthMismatch);
    }
    let offsets: Vec<f64> = initial
        .iter()
        .map(|&q| logit(clamp_prob(q)).expect("clamped into the logit domain"))
        .collect();
    let w_sum: f64 = weights.iter().sum();
    if w_sum <= 0.0 {
        let updated = offsets.iter().map(|&l| expit(l)).collect();
        return Ok((0.0, updated));
    }
    let score = |eps: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..initial.len() {
            if weights[i] > 0.0 {
                acc += weights[i] * (outcomes[i] - expit(offsets[i] + eps));
            }
        }
        acc
    };
    // The score is strictly decreasing in epsilon; bisect, polishing with
    // Newton steps when they stay inside the bracket.
    let mut lo = -EPSILON_BOUND;
    let mut hi = EPSILON_BOUND;
    let s_lo = score(lo);
    let s_hi = score(hi);
    let eps = if s_lo <= 0.0 {
        lo // even the lower bound over-shoots; clamp
    } else if s_hi >= 0.0 {
        hi
    } else {
        let mut eps = 0.0;
        for _ in 0..200 {
            let s = score(eps);
            if s.abs() <= TILT_TOLERANCE * w_sum.max(1.0) {
                break;
            }
            if s > 0.0 {
                lo = eps;
            } else {
                hi = eps;
            }
            // Newton step on the weighted score.
            let mut deriv = 0.0;
            for i in 0..initial.len() {
                if weights[i] > 0.0 {
                    let p = expit(offsets[i] + eps);
                    deriv += weights[i] * p * (1.0 - p);
                }
            }
            let newton = if deriv > 0.0 { eps + s / deriv } else { f64::NAN };
            eps = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        eps
    };
    let updated = offsets.iter().map(|&l| expit(l + eps)).collect();
    Ok((eps, updated))
}

/// One tilting step's bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiltRecord {
    pub g: u8,
    pub k: usize,
    /// "hazard" or "surrogate" (the pooled first stage).
    pub stage: &'static str,
    pub epsilon: f64,
    /// Score value after the update, for the solving diagnostic.
    pub residual_score: f64,
}

/// Targeted sequential means and the resulting estimate.
#[derive(Debug, Clone)]
pub struct TargetedFit {
    pub target: Target,
    /// Final targeted Q values at k = 1, per arm then subject.
    pub q_mu_first: [Vec<f64>; 2],
    pub tilts: Vec<TiltRecord>,
    pub estimate: f64,
}

/// TMLE output: the fit, the estimate with plug-in-IF inference attached,
/// and the residual of the targeted influence-function equation.
#[derive(Debug, Clone)]
pub struct TmleResult {
    pub fit: TargetedFit,
    pub estimate: EffectEstimate,
    /// |mean of the centered influence function at the targeted fit|.
    pub eif_residual: f64,
}

struct SweepState {
    /// Current targeted Q values per arm and subject (NaN = undefined).
    q_mu: [Vec<f64>; 2],
    tilts: Vec<TiltRecord>,
    /// Accumulated score sums, signed (+ treated, - control).
    score_total: f64,
}

fn regress_and_predict(
    dataset: &LongitudinalDataset,
    design: &DesignSpec,
    lag: usize,
    rows_members: &[usize],
    outcomes: &[f64],
    predict_members: &[usize],
    g: u8,
    k: usize,
) -> Result<Vec<(usize, f64)>, TmleError> {
    let rows: Vec<FitRow> = rows_members
        .iter()
        .zip(outcomes)
        .map(|(&i, &y)| FitRow {
            features: design.features(&dataset.subjects[i].x, &dataset.subjects[i].s_hist(lag)),
            outcome: y.clamp(0.0, 1.0),
            weight: 1.0,
            offset: 0.0,
        })
        .collect();
    let model = fit_logistic(&rows, design.clone())
        .map_err(|source| TmleError::Regression { g, k, source })?;
    Ok(predict_members
        .iter()
        .map(|&i| {
            let subj = &dataset.subjects[i];
            let p = model
                .predict(&subj.x, &subj.s_hist(lag))
                .expect("fixed dimensions");
            (i, p)
        })
        .collect())
}

fn apply_tilt(
    members: &[usize],
    initial: &[f64],
    outcomes: &[f64],
    weights_full: &[f64],
    state: &mut SweepState,
    g: u8,
    k: usize,
    stage: &'static str,
    dest: &mut [f64],
) -> Result<(), TmleError> {
    let w: Vec<f64> = members.iter().map(|&i| weights_full[i]).collect();
    let (epsilon, updated) = tilt_step(initial, outcomes, &w)?;
    let mut residual = 0.0;
    for (pos, &i) in members.iter().enumerate() {
        dest[i] = updated[pos];
        residual += w[pos] * (outcomes[pos] - updated[pos]);
    }
    let sign = if g == 1 { 1.0 } else { -1.0 };
    state.score_total += sign * residual;
    state.tilts.push(TiltRecord {
        g,
        k,
        stage,
        epsilon,
        residual_score: residual,
    });
    Ok(())
}

/// TML estimator of the overall effect Delta(t).
pub fn tmle_delta(
    dataset: &LongitudinalDataset,
    nuis: &NuisanceSet,
    plan: &SequentialPlan,
    alpha: f64,
) -> Result<TmleResult, TmleError> {
    let grid = nuis.grid;
    let n = dataset.n();
    let t = grid.t();
    let mut state = SweepState {
        q_mu: [vec![f64::NAN; n], vec![f64::NAN; n]],
        tilts: Vec::new(),
        score_total: 0.0,
    };
    // Q_{mu g,t+1} = 1 for survivors of t.
    for g in [0usize, 1] {
        for (i, subj) in dataset.subjects.iter().enumerate() {
            if subj.uncensored_through(t) && subj.survived_through(t) {
                state.q_mu[g][i] = 1.0;
            }
        }
    }
    for k in (1..=t).rev() {
        let lag = grid.lag_at(k);
        let cens_risk: Vec<usize> = (0..n)
            .filter(|&i| dataset.subjects[i].at_risk_censoring(k))
            .collect();
        for g in [0u8, 1u8] {
            let gi = g as usize;
            // Pseudo-outcome Y_k * Q_hat_{mu g k+1} on the arm-g hazard
            // risk set; zero when the event has occurred at k.
            let members: Vec<usize> = (0..n)
                .filter(|&i| dataset.subjects[i].g == g && dataset.subjects[i].at_risk_hazard(k))
                .collect();
            let outcomes: Vec<f64> = members
                .iter()
                .map(|&i| {
                    let y = dataset.subjects[i].y_at(k);
                    if y > 0.0 {
                        state.q_mu[gi][i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let preds = regress_and_predict(
                dataset,
                &plan.hazard[k - 1],
                lag,
                &members,
                &outcomes,
                &cens_risk,
                g,
                k,
            )?;
            let mut q_tilde = vec![f64::NAN; n];
            for (i, p) in preds {
                q_tilde[i] = p;
            }
            let weights = CleverWeights::delta(dataset, nuis, g, k).values;
            // Tilt over the censoring risk set (weights vanish off the
            // hazard risk set); outcomes only matter where weight > 0.
            let init: Vec<f64> = cens_risk.iter().map(|&i| q_tilde[i]).collect();
            let outs: Vec<f64> = cens_risk
                .iter()
                .map(|&i| {
                    if weights[i] > 0.0 {
                        let y = dataset.subjects[i].y_at(k);
                        if y > 0.0 {
                            state.q_mu[gi][i]
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut dest = vec![f64::NAN; n];
            apply_tilt(
                &cens_risk, &init, &outs, &weights, &mut state, g, k, "hazard", &mut dest,
            )?;
            for &i in &cens_risk {
                state.q_mu[gi][i] = dest[i];
            }
        }
    }
    let estimate = (0..n)
        .map(|i| state.q_mu[1][i] - state.q_mu[0][i])
        .sum::<f64>()
        / n as f64;
    let eif_residual = (state.score_total / n as f64).abs();

    // Inference reuses the plug-in empirical influence functions.
    let phi: Vec<f64> = dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| eval_if_delta(s, nuis, i))
        .collect();
    let (_, se) = variance_from_if(&phi)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(TmleResult {
        fit: TargetedFit {
            target: Target::Delta,
            q_mu_first: [state.q_mu[0].clone(), state.q_mu[1].clone()],
            tilts: state.tilts,
            estimate,
        },
        estimate: EffectEstimate {
            target: Target::Delta,
            value: estimate,
            if_values: phi,
            se,
            ci: (estimate - z * se, estimate + z * se),
            grid,
        },
        eif_residual,
    })
}

/// TML estimator of the residual effect Delta_S(t, t0); two-stage targeting
/// at steps with surrogate information.
pub fn tmle_delta_s(
    dataset: &LongitudinalDataset,
    nuis: &NuisanceSet,
    plan: &SequentialPlan,
    alpha: f64,
) -> Result<TmleResult, TmleError> {
    let grid = nuis.grid;
    let n = dataset.n();
    let t = grid.t();
    let t0 = grid.t0();
    let mut state = SweepState {
        q_mu: [vec![f64::NAN; n], vec![f64::NAN; n]],
        tilts: Vec::new(),
        score_total: 0.0,
    };
    for g in [0usize, 1] {
        for (i, subj) in dataset.subjects.iter().enumerate() {
            if subj.uncensored_through(t) && subj.survived_through(t) {
                state.q_mu[g][i] = 1.0;
            }
        }
    }
    for k in (1..=t).rev() {
        let lag = grid.lag_at(k);
        let cens_risk: Vec<usize> = (0..n)
            .filter(|&i| dataset.subjects[i].at_risk_censoring(k))
            .collect();
        let survivors: Vec<usize> = (0..n)
            .filter(|&i| {
                let s = &dataset.subjects[i];
                s.uncensored_through(k) && s.survived_through(k)
            })
            .collect();
        for g in [0u8, 1u8] {
            let gi = g as usize;
            // Stage 1 (k <= t0): pooled-arm targeting of the reference mean
            // Q*_{gk}; the stage-2 pseudo-outcome then uses the targeted
            // value. Beyond t0 the pseudo-outcome chains Q*_{mu g k+1}.
            let mut q_star_hat = vec![f64::NAN; n];
            if k <= t0 {
                let outcomes: Vec<f64> = survivors.iter().map(|&i| state.q_mu[gi][i]).collect();
                let preds = regress_and_predict(
                    dataset,
                    &plan.q_star[k - 1],
                    lag,
                    &survivors,
                    &outcomes,
                    &cens_risk,
                    g,
                    k,
                )?;
                let mut q_tilde = vec![f64::NAN; n];
                for (i, p) in preds {
                    q_tilde[i] = p;
                }
                let weights = CleverWeights::delta_s_surrogate(dataset, nuis, g, k).values;
                let init: Vec<f64> = cens_risk.iter().map(|&i| q_tilde[i]).collect();
                let outs: Vec<f64> = cens_risk
                    .iter()
                    .map(|&i| {
                        if weights[i] > 0.0 {
                            state.q_mu[gi][i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                apply_tilt(
                    &cens_risk,
                    &init,
                    &outs,
                    &weights,
                    &mut state,
                    g,
                    k,
                    "surrogate",
                    &mut q_star_hat,
                )?;
            }
            // Stage 2 (every k): within-arm hazard targeting of Q*_{mu gk}.
            let members: Vec<usize> = (0..n)
                .filter(|&i| dataset.subjects[i].g == g && dataset.subjects[i].at_risk_hazard(k))
                .collect();
            let pseudo = |i: usize| -> f64 {
                let y = dataset.subjects[i].y_at(k);
                if y == 0.0 {
                    0.0
                } else if k <= t0 {
                    q_star_hat[i]
                } else {
                    state.q_mu[gi][i]
                }
            };
            let outcomes: Vec<f64> = members.iter().map(|&i| pseudo(i)).collect();
            let preds = regress_and_predict(
                dataset,
                &plan.hazard[k - 1],
                lag,
                &members,
                &outcomes,
                &cens_risk,
                g,
                k,
            )?;
            let mut q_tilde = vec![f64::NAN; n];
            for (i, p) in preds {
                q_tilde[i] = p;
            }
            let weights = CleverWeights::delta_s_hazard(dataset, nuis, g, k).values;
            let init: Vec<f64> = cens_risk.iter().map(|&i| q_tilde[i]).collect();
            let outs: Vec<f64> = cens_risk
                .iter()
                .map(|&i| if weights[i] > 0.0 { pseudo(i) } else { 0.0 })
                .collect();
            let mut dest = vec![f64::NAN; n];
            apply_tilt(
                &cens_risk, &init, &outs, &weights, &mut state, g, k, "hazard", &mut dest,
            )?;
            for &i in &cens_risk {
                state.q_mu[gi][i] = dest[i];
            }
        }
    }
    let estimate = (0..n)
        .map(|i| state.q_mu[1][i] - state.q_mu[0][i])
        .sum::<f64>()
        / n as f64;
    let eif_residual = (state.score_total / n as f64).abs();

    let phi_s: Vec<f64> = dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| eval_if_delta_s(s, nuis, i))
        .collect();
    let (_, se) = variance_from_if(&phi_s)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(TmleResult {
        fit: TargetedFit {
            target: Target::DeltaS,
            q_mu_first: [state.q_mu[0].clone(), state.q_mu[1].clone()],
            tilts: state.tilts,
            estimate,
        },
        estimate: EffectEstimate {
            target: Target::DeltaS,
            value: estimate,
            if_values: phi_s,
            se,
            ci: (estimate - z * se, estimate + z * se),
            grid,
        },
        eif_residual,
    })
}

/// The three targeted estimates plus influence-solving diagnostics.
#[derive(Debug, Clone)]
pub struct TmleEstimates {
    pub delta: TmleResult,
    pub delta_s: TmleResult,
    pub r: Option<EffectEstimate>,
    pub r_undefined_reason: Option<String>,
}

/// Run both targeted estimators and combine them into the proportion
/// explained, with variances evaluated from the plug-in influence
/// functions at the targeted point estimates.
pub fn tmle_estimates(
    dataset: &LongitudinalDataset,
    nuis: &NuisanceSet,
    plan: &SequentialPlan,
    alpha: f64,
) -> Result<TmleEstimates, TmleError> {
    let delta = tmle_delta(dataset, nuis, plan, alpha)?;
    let delta_s = tmle_delta_s(dataset, nuis, plan, alpha)?;
    let (r, reason) = r_estimate(
        nuis.grid,
        delta.estimate.value,
        delta_s.estimate.value,
        &delta.estimate.if_values,
        &delta_s.estimate.if_values,
        alpha,
    )?;
    Ok(TmleEstimates {
        delta,
        delta_s,
        r,
        r_undefined_reason: reason,
    })
}
