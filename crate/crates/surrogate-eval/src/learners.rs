//! Binary-outcome regression used for every nuisance function.
//!
//! The base learner is a weighted logistic regression fitted by iteratively
//! reweighted least squares. It accepts fractional outcomes in `[0, 1]`,
//! per-row observation weights, and per-row offsets; the offset support is
//! what the targeting (tilting) steps rely on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp for every predicted probability. Operationalizes the
/// positivity constants: no fitted probability is ever reported outside
/// `[P_MIN, 1 - P_MIN]`.
pub const P_MIN: f64 = 1e-3;

/// Iteration cap for the IRLS loop.
pub const MAX_ITERATIONS: usize = 100;

/// Convergence tolerance on the coefficient-update sup-norm.
pub const COEF_TOLERANCE: f64 = 1e-10;

/// Jitter added to the diagonal of the weighted normal equations. The solver
/// iterates on Newton increments, so the fixed point still solves the exact
/// (unpenalized) weighted score equations.
pub const RIDGE_JITTER: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("no rows with positive weight")]
    NoInformativeRows,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("outcome {0} outside [0, 1]")]
    OutcomeOutOfRange(f64),
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("feature dimension mismatch: model has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("logit argument {0} outside (0, 1)")]
    LogitDomain(f64),
    #[error("rows have inconsistent feature dimension")]
    RaggedRows,
}

/// Numerically stable logistic function, exact down to the smallest
/// subnormal (no underflow to zero before |x| ~ 745).
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`] on (0, 1).
pub fn logit(p: f64) -> Result<f64, LearnerError> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(LearnerError::LogitDomain(p));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Clamp a probability into `[P_MIN, 1 - P_MIN]`.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Deterministic feature construction over pre-treatment covariates and a
/// surrogate history prefix.
///
/// Ordering is fixed: intercept, covariates in input order, surrogate lags in
/// time order, then (optionally) squares and pairwise interactions, then
/// (optionally) the full product basis when `saturated` is set. A saturated
/// spec over binary inputs reproduces cell-indicator regression, which makes
/// the fitted values exact empirical cell means.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n_covariates: usize,
    pub n_surrogate_lags: usize,
    pub interactions: bool,
    pub quadratic: bool,
    pub saturated: bool,
}

impl DesignSpec {
    pub fn main_effects(n_covariates: usize, n_surrogate_lags: usize) -> Self {
        DesignSpec {
            n_covariates,
            n_surrogate_lags,
            interactions: false,
            quadratic: false,
            saturated: false,
        }
    }

    pub fn saturated(n_covariates: usize, n_surrogate_lags: usize) -> Self {
        DesignSpec {
            n_covariates,
            n_surrogate_lags,
            interactions: false,
            quadratic: false,
            saturated: true,
        }
    }

    fn n_inputs(&self) -> usize {
        self.n_covariates + self.n_surrogate_lags
    }

    /// Number of columns this spec produces (including the intercept).
    pub fn n_features(&self) -> usize {
        let m = self.n_inputs();
        if self.saturated {
            return 1usize << m;
        }
        let mut n = 1 + m;
        if self.quadratic {
            n += m;
        }
        if self.interactions {
            n += m * (m - 1) / 2;
        }
        n
    }

    /// Build the feature row for one record into `out`. `s_hist` is the
    /// observed surrogate history in time order; the design consumes its most
    /// recent `n_surrogate_lags` values, so a shorter-memory design can be
    /// evaluated on a longer history.
    pub fn features_into(&self, x: &[f64], s_hist: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.n_covariates);
        debug_assert!(s_hist.len() >= self.n_surrogate_lags);
        let s_hist = &s_hist[s_hist.len() - self.n_surrogate_lags..];
        out.clear();
        let m = self.n_inputs();
        if self.saturated {
            // All subset products of the raw inputs; subset 0 is the intercept.
            for mask in 0..(1usize << m) {
                let mut v = 1.0;
                for bit in 0..m {
                    if mask & (1 << bit) != 0 {
                        v *= raw_input(x, s_hist, bit);
                    }
                }
                out.push(v);
            }
            return;
        }
        out.push(1.0);
        for i in 0..m {
            out.push(raw_input(x, s_hist, i));
        }
        if self.quadratic {
            for i in 0..m {
                let v = raw_input(x, s_hist, i);
                out.push(v * v);
            }
        }
        if self.interactions {
            for i in 0..m {
                for j in (i + 1)..m {
                    out.push(raw_input(x, s_hist, i) * raw_input(x, s_hist, j));
                }
            }
        }
    }

    pub fn features(&self, x: &[f64], s_hist: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_features());
        self.features_into(x, s_hist, &mut out);
        out
    }
}

fn raw_input(x: &[f64], s_hist: &[f64], i: usize) -> f64 {
    if i < x.len() {
        x[i]
    } else {
        s_hist[i - x.len()]
    }
}

/// A fitted weighted logistic regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub coefficients: Vec<f64>,
    pub design: DesignSpec,
    pub converged: bool,
    pub n_iterations: usize,
}

impl FittedModel {
    /// Clamped probability prediction for a pre-built feature row.
    pub fn predict_proba(&self, features: &[f64], offset: f64) -> Result<f64, LearnerError> {
        if features.len() != self.coefficients.len() {
            return Err(LearnerError::DimensionMismatch {
                expected: self.coefficients.len(),
                actual: features.len(),
            });
        }
        let eta: f64 = self
            .coefficients
            .iter()
            .zip(features)
            .map(|(b, f)| b * f)
            .sum::<f64>()
            + offset;
        Ok(clamp_prob(expit(eta)))
    }

    /// Prediction from raw inputs via the stored design.
    pub fn predict(&self, x: &[f64], s_hist: &[f64]) -> Result<f64, LearnerError> {
        let feats = self.design.features(x, s_hist);
        self.predict_proba(&feats, 0.0)
    }
}

/// One training row: features, outcome in `[0, 1]`, weight, offset.
#[derive(Debug, Clone)]
pub struct FitRow {
    pub features: Vec<f64>,
    pub outcome: f64,
    pub weight: f64,
    pub offset: f64,
}

/// Fit a weighted logistic regression with offsets by IRLS.
///
/// Maximizes the weighted Bernoulli quasi-log-likelihood, which is well
/// defined for fractional outcomes. Quasi-separated data hit the iteration
/// cap and come back with `converged == false`; predictions stay usable
/// through clamping.
pub fn fit_logistic(rows: &[FitRow], design: DesignSpec) -> Result<FittedModel, LearnerError> {
    let p = match rows.first() {
        Some(r) => r.features.len(),
        None => return Err(LearnerError::NoInformativeRows),
    };
    let mut any_weight = false;
    for r in rows {
        if r.features.len() != p {
            return Err(LearnerError::RaggedRows);
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("features"));
        }
        if !r.outcome.is_finite() || !(0.0..=1.0).contains(&r.outcome) {
            return Err(LearnerError::OutcomeOutOfRange(r.outcome));
        }
        if !r.weight.is_finite() || r.weight < 0.0 {
            return Err(LearnerError::NegativeWeight(r.weight));
        }
        if !r.offset.is_finite() {
            return Err(LearnerError::NonFinite("offset"));
        }
        if r.weight > 0.0 {
            any_weight = true;
        }
    }
    if !any_weight {
        return Err(LearnerError::NoInformativeRows);
    }

    let mut beta = vec![0.0; p];
    let mut converged = false;
    let mut n_iterations = 0;
    let mut loglik = quasi_loglik(rows, &beta);

    for iter in 0..MAX_ITERATIONS {
        n_iterations = iter + 1;
        // Weighted score and Fisher information at the current beta.
        let mut score = vec![0.0; p];
        let mut info = vec![0.0; p * p];
        for r in rows {
            if r.weight == 0.0 {
                continue;
            }
            let eta: f64 = beta.iter().zip(&r.features).map(|(b, f)| b * f).sum::<f64>() + r.offset;
            let mu = expit(eta);
            let resid = r.weight * (r.outcome - mu);
            let wvar = r.weight * (mu * (1.0 - mu)).max(1e-12);
            for a in 0..p {
                score[a] += resid * r.features[a];
                let fa = wvar * r.features[a];
                for b in a..p {
                    info[a * p + b] += fa * r.features[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[a * p + b] = info[b * p + a];
            }
            info[a * p + a] += RIDGE_JITTER;
        }
        let step = match solve_symmetric(&mut info, &score, p) {
            Some(s) => s,
            None => break, // singular even with jitter; report non-convergence
        };

        // Step-halving keeps the quasi-log-likelihood non-decreasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&step)
                .map(|(b, d)| b + scale * d)
                .collect();
            let cand_ll = quasi_loglik(rows, &candidate);
            if cand_ll.is_finite() && cand_ll >= loglik - 1e-12 {
                let max_change = step.iter().map(|d| (scale * d).abs()).fold(0.0, f64::max);
                beta = candidate;
                loglik = cand_ll;
                accepted = true;
                if max_change < COEF_TOLERANCE {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted || converged {
            break;
        }
    }

    Ok(FittedModel {
        coefficients: beta,
        design,
        converged,
        n_iterations,
    })
}

fn quasi_loglik(rows: &[FitRow], beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for r in rows {
        if r.weight == 0.0 {
            continue;
        }
        let eta: f64 = beta.iter().zip(&r.features).map(|(b, f)| b * f).sum::<f64>() + r.offset;
        // y*eta - log(1 + e^eta), written to avoid overflow for large |eta|.
        let log1pe = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        ll += r.weight * (r.outcome * eta - log1pe);
    }
    ll
}

/// Solve `A x = b` for symmetric positive-definite `A` (row-major, n x n)
/// by Gaussian elimination with partial pivoting. `A` is clobbered.
fn solve_symmetric(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for j in (col + 1)..n {
            v -= a[col * n + j] * x[j];
        }
        x[col] = v / a[col * n + col];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}
