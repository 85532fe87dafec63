//! Influence-function variance and confidence-interval machinery, the joint
//! covariance of stacked influence functions, and the stepdown selection of
//! the surrogate collection horizon.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("influence-function vectors have mismatched lengths")]
    LengthMismatch,
    #[error("margin {0} outside (0, 1)")]
    InvalidMargin(f64),
    #[error("|delta| = {0} below the ratio floor; R inference undefined")]
    DeltaNearZero(f64),
    #[error("resampling critical values not implemented; enable the multiplier bootstrap or use monotone = true")]
    ResamplingUnavailable,
    #[error("stepdown needs at least one candidate horizon before t_L")]
    NoCandidates,
}

/// Smallest |Delta| for which a ratio-based quantity is reported.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Quantile of the standard normal distribution (Wichura's PPND16).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_123e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_716_237_837_905e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_415_576e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Sample variance (n - 1 divisor) of centered influence values and the
/// standard error of their mean.
pub fn variance_from_if(if_values: &[f64]) -> Result<(f64, f64), InferenceError> {
    let n = if_values.len();
    if n < 2 {
        return Err(InferenceError::TooFewObservations(n));
    }
    let mean = if_values.iter().sum::<f64>() / n as f64;
    let sigma2 = if_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    Ok((sigma2, (sigma2 / n as f64).sqrt()))
}

fn centered_moment(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1.0)
}

/// Asymptotic variance of the proportion-explained ratio `1 - Delta_S /
/// Delta` by the functional delta method:
///
/// `sigma2_R = Delta^-2 E[phi_S^2] + Delta_S^2 Delta^-4 E[phi^2]
///             - 2 Delta_S Delta^-3 E[phi phi_S]`
///
/// with centered second moments, so the result is invariant to adding a
/// constant to either influence vector.
pub fn variance_r(
    delta: f64,
    delta_s: f64,
    phi: &[f64],
    phi_s: &[f64],
) -> Result<f64, InferenceError> {
    if phi.len() != phi_s.len() {
        return Err(InferenceError::LengthMismatch);
    }
    if phi.len() < 2 {
        return Err(InferenceError::TooFewObservations(phi.len()));
    }
    if delta.abs() < DELTA_FLOOR {
        return Err(InferenceError::DeltaNearZero(delta.abs()));
    }
    let v_phi = centered_moment(phi, phi);
    let v_phi_s = centered_moment(phi_s, phi_s);
    let cov = centered_moment(phi, phi_s);
    Ok(v_phi_s / (delta * delta) + delta_s * delta_s / delta.powi(4) * v_phi
        - 2.0 * delta_s / delta.powi(3) * cov)
}

/// Empirical covariance matrix of stacked influence-function columns.
pub fn covariance_sigma(columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, InferenceError> {
    let m = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(InferenceError::TooFewObservations(n));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(InferenceError::LengthMismatch);
    }
    let mut out = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a..m {
            let v = centered_moment(&columns[a], &columns[b]);
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

/// Variance summary for the three targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub sigma2_delta: f64,
    pub sigma2_delta_s: f64,
    /// `None` when |Delta| sits below the ratio floor.
    pub sigma2_r: Option<f64>,
    /// Covariance of the stacked centered influence functions (phi, phi_S).
    pub sigma: Vec<Vec<f64>>,
    pub n: usize,
}

/// Build the plain two-target variance report from uncentered influence
/// vectors.
pub fn variance_report(
    phi: &[f64],
    phi_s: &[f64],
    delta: f64,
    delta_s: f64,
) -> Result<VarianceReport, InferenceError> {
    let (sigma2_delta, _) = variance_from_if(phi)?;
    let (sigma2_delta_s, _) = variance_from_if(phi_s)?;
    let sigma2_r = variance_r(delta, delta_s, phi, phi_s).ok();
    let sigma = covariance_sigma(&[phi.to_vec(), phi_s.to_vec()])?;
    Ok(VarianceReport {
        sigma2_delta,
        sigma2_delta_s,
        sigma2_r,
        sigma,
        n: phi.len(),
    })
}

/// One tested candidate horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateStat {
    pub j: usize,
    /// `R_hat(t, t_L) - R_hat(t, j) - margin`.
    pub delta_hat: f64,
    /// Standard error of `delta_hat` (already scaled by 1/sqrt(n)).
    pub se: f64,
    pub tau: f64,
    pub rejected: bool,
}

/// Outcome of the stepdown procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepdownResult {
    pub candidates: Vec<CandidateStat>,
    /// Smallest surviving horizon, or `t_l` when every candidate fell.
    pub recommended_t0: usize,
    pub all_rejected: bool,
    pub margin: f64,
    pub alpha: f64,
    pub t_l: usize,
    /// Human-readable notes (e.g. the all-rejected fallback).
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            n_draws: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepdownOptions {
    /// Monotone simplification: fixed `z_{1-alpha}` critical values.
    pub monotone: bool,
    /// Gaussian-multiplier bootstrap for the non-monotone max statistic.
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for StepdownOptions {
    fn default() -> Self {
        StepdownOptions {
            monotone: true,
            bootstrap: None,
        }
    }
}

/// Candidate statistics supplied directly (one per `j = 1..t_L-1`).
#[derive(Debug, Clone, Copy)]
pub struct StepdownCandidate {
    pub j: usize,
    pub delta_hat: f64,
    pub se: f64,
}

/// Iterative max-statistic stepdown over pre-computed candidate statistics.
///
/// Under the monotone simplification every hypothesis is tested against
/// `z_{1-alpha}`; the max statistic is removed while rejections occur and
/// the recommendation is the smallest surviving horizon.
pub fn stepdown_select_t0(
    candidates: &[StepdownCandidate],
    t_l: usize,
    margin: f64,
    alpha: f64,
    options: &StepdownOptions,
) -> Result<StepdownResult, InferenceError> {
    if !(0.0..1.0).contains(&margin) || margin <= 0.0 {
        return Err(InferenceError::InvalidMargin(margin));
    }
    if candidates.is_empty() {
        return Err(InferenceError::NoCandidates);
    }
    if !options.monotone {
        // The statistics alone cannot drive a resampling critical value.
        return Err(InferenceError::ResamplingUnavailable);
    }
    let critical = |_active: &[usize]| normal_quantile(1.0 - alpha);
    run_stepdown(candidates, t_l, margin, alpha, StepdownOrder::Monotone, critical)
}

/// How the next hypothesis is picked at each stepdown stage.
enum StepdownOrder {
    /// Under the monotonicity assumption the stage-k maximum statistic is
    /// the k-th horizon's, so the stages walk the horizons in order. This
    /// fixed sequence keeps the familywise error at alpha under any joint
    /// distribution of the statistics.
    Monotone,
    /// General procedure: the realized maximum statistic, paired with
    /// resampled critical values.
    MaxStatistic,
}

fn run_stepdown<F: Fn(&[usize]) -> f64>(
    candidates: &[StepdownCandidate],
    t_l: usize,
    margin: f64,
    alpha: f64,
    order: StepdownOrder,
    critical: F,
) -> Result<StepdownResult, InferenceError> {
    let taus: Vec<f64> = candidates
        .iter()
        .map(|c| {
            if c.se > 0.0 {
                c.delta_hat / c.se
            } else if c.delta_hat > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut active: Vec<usize> = (0..candidates.len()).collect();
    let mut rejected = vec![false; candidates.len()];
    while !active.is_empty() {
        let (next, tau_next) = match order {
            StepdownOrder::Monotone => {
                let idx = *active
                    .iter()
                    .min_by_key(|&&i| candidates[i].j)
                    .unwrap();
                (idx, taus[idx])
            }
            StepdownOrder::MaxStatistic => active
                .iter()
                .map(|&idx| (idx, taus[idx]))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap(),
        };
        if tau_next > critical(&active) {
            rejected[next] = true;
            active.retain(|&i| i != next);
        } else {
            break;
        }
    }
    let all_rejected = active.is_empty();
    let mut notes = Vec::new();
    let recommended_t0 = if all_rejected {
        notes.push("every candidate horizon was rejected; falling back to t_L".to_string());
        t_l
    } else {
        candidates[*active.iter().min().unwrap()].j
    };
    let stats = candidates
        .iter()
        .enumerate()
        .map(|(idx, c)| CandidateStat {
            j: c.j,
            delta_hat: c.delta_hat,
            se: c.se,
            tau: taus[idx],
            rejected: rejected[idx],
        })
        .collect();
    Ok(StepdownResult {
        candidates: stats,
        recommended_t0,
        all_rejected,
        margin,
        alpha,
        t_l,
        notes,
    })
}

/// Stepdown driven by per-candidate influence functions.
///
/// `phi_tilde_s_by_horizon[j - 1]` holds the uncentered influence values of
/// the residual effect with surrogate horizon `j`, for `j = 1..=t_L` (the
/// last entry is the reference horizon `t_L` itself); `phi_tilde` holds the
/// uncentered influence values of the overall effect. Per candidate the
/// variance is `zeta' Sigma zeta` with `zeta = (1/Delta, -1/Delta,
/// -delta_j/Delta^2)` and `Sigma` the covariance of the stacked influence
/// functions for that candidate.
pub fn stepdown_from_ifs(
    phi_tilde_s_by_horizon: &[Vec<f64>],
    phi_tilde: &[f64],
    margin: f64,
    alpha: f64,
    options: &StepdownOptions,
) -> Result<StepdownResult, InferenceError> {
    if !(0.0..1.0).contains(&margin) || margin <= 0.0 {
        return Err(InferenceError::InvalidMargin(margin));
    }
    let t_l = phi_tilde_s_by_horizon.len();
    if t_l < 2 {
        return Err(InferenceError::NoCandidates);
    }
    let n = phi_tilde.len();
    if n < 2 {
        return Err(InferenceError::TooFewObservations(n));
    }
    if phi_tilde_s_by_horizon.iter().any(|v| v.len() != n) {
        return Err(InferenceError::LengthMismatch);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let delta = mean(phi_tilde);
    if delta.abs() < DELTA_FLOOR {
        return Err(InferenceError::DeltaNearZero(delta.abs()));
    }
    let delta_s_tl = mean(&phi_tilde_s_by_horizon[t_l - 1]);

    let mut candidates = Vec::with_capacity(t_l - 1);
    // Per-subject influence rows of each candidate's delta_hat statistic,
    // for the multiplier bootstrap.
    let mut delta_if_rows: Vec<Vec<f64>> = Vec::with_capacity(t_l - 1);
    for j in 1..t_l {
        let phi_s_j = &phi_tilde_s_by_horizon[j - 1];
        let delta_s_j = mean(phi_s_j);
        let delta_hat = (delta_s_j - delta_s_tl) / delta - margin;
        let sigma = covariance_sigma(&[
            phi_s_j.clone(),
            phi_tilde_s_by_horizon[t_l - 1].clone(),
            phi_tilde.to_vec(),
        ])?;
        // Exact gradient of (Delta_S(j) - Delta_S(t_L))/Delta - margin; the
        // last entry keeps the margin offset so the variance is right under
        // the null rather than only far from it.
        let zeta = [
            1.0 / delta,
            -1.0 / delta,
            -(delta_hat + margin) / (delta * delta),
        ];
        let mut sigma2 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                sigma2 += zeta[a] * sigma[a][b] * zeta[b];
            }
        }
        let se = (sigma2.max(0.0) / n as f64).sqrt();
        candidates.push(StepdownCandidate {
            j,
            delta_hat,
            se,
        });
        let m_j = delta_s_j;
        let m_tl = delta_s_tl;
        let rows: Vec<f64> = (0..n)
            .map(|i| {
                zeta[0] * (phi_s_j[i] - m_j)
                    + zeta[1] * (phi_tilde_s_by_horizon[t_l - 1][i] - m_tl)
                    + zeta[2] * (phi_tilde[i] - delta)
            })
            .collect();
        delta_if_rows.push(rows);
    }

    if options.monotone {
        let critical = |_active: &[usize]| normal_quantile(1.0 - alpha);
        return run_stepdown(&candidates, t_l, margin, alpha, StepdownOrder::Monotone, critical);
    }
    let Some(boot) = options.bootstrap else {
        return Err(InferenceError::ResamplingUnavailable);
    };
    // Pre-draw the multiplier max-statistics once per candidate set is not
    // possible (the set shrinks), so draw multipliers per replicate and
    // reuse them across the stepdown iterations for determinism.
    let ses: Vec<f64> = candidates.iter().map(|c| c.se).collect();
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(boot.n_draws); candidates.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(crate::simulation::derive_seed(boot.seed, 0xb007));
    for _ in 0..boot.n_draws {
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for (c_idx, rows) in delta_if_rows.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += xi[i] * rows[i];
            }
            let perturbation = acc / n as f64;
            let stat = if ses[c_idx] > 0.0 {
                perturbation / ses[c_idx]
            } else {
                0.0
            };
            draws[c_idx].push(stat);
        }
    }
    let critical = move |active: &[usize]| -> f64 {
        let mut maxima: Vec<f64> = (0..boot.n_draws)
            .map(|d| {
                active
                    .iter()
                    .map(|&c| draws[c][d])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((1.0 - alpha) * boot.n_draws as f64).ceil() as usize;
        maxima[rank.min(boot.n_draws - 1).saturating_sub(0)]
    };
    run_stepdown(&candidates, t_l, margin, alpha, StepdownOrder::MaxStatistic, critical)
}
