//! In-memory representation of discrete-time longitudinal surrogate/survival
//! data, validation against the observed-data structure, risk-set queries,
//! and fold assignment for cross-fitting.
//!
//! Per subject and time `k` the observed block is `(A_k, Y_k, S_k)`:
//! `A_k` indicates the subject is still uncensored at `k`, `Y_k` indicates
//! survival through `k` (observed only while uncensored), and `S_k` is the
//! surrogate (observed only for uncensored survivors, and only for
//! `k <= t0`). Ties between event and censoring at the same `k` are resolved
//! censoring-first: `A_k = 0` masks `Y_k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid time grid: t = {t}, t0 = {t0} (need 1 <= t0 <= t)")]
    InvalidGrid { t: usize, t0: usize },
    #[error("time index {k} outside 1..={t}")]
    TimeOutOfRange { k: usize, t: usize },
    #[error("n_folds = {n_folds} invalid for {n} subjects (need 2 <= n_folds <= n)")]
    InvalidFolds { n_folds: usize, n: usize },
    #[error("treatment arm {0} is empty")]
    EmptyArm(u8),
}

/// Discrete time grid: outcome horizon `t` and surrogate horizon `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    t: usize,
    t0: usize,
}

impl TimeGrid {
    pub fn new(t: usize, t0: usize) -> Result<Self, DataError> {
        if t0 < 1 || t0 > t {
            return Err(DataError::InvalidGrid { t, t0 });
        }
        Ok(TimeGrid { t, t0 })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Length of the surrogate history S̄_{k-1} available to a model at
    /// time `k` (capped at `t0`).
    pub fn lag_at(&self, k: usize) -> usize {
        (k - 1).min(self.t0)
    }

    /// With a shorter surrogate horizon; used when re-running the pipeline
    /// per candidate horizon.
    pub fn with_t0(&self, t0: usize) -> Result<Self, DataError> {
        TimeGrid::new(self.t, t0)
    }
}

/// One subject's observed trajectory.
///
/// `a[k-1]`, `y[k-1]` are `A_k`, `Y_k` for `k = 1..=t`; `s[k-1]` is `S_k` for
/// `k = 1..=t0`. Missing entries are `None`, never a sentinel value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub x: Vec<f64>,
    pub g: u8,
    pub a: Vec<bool>,
    pub y: Vec<Option<bool>>,
    pub s: Vec<Option<f64>>,
}

impl SubjectRecord {
    /// True iff `A_1 = ... = A_k = 1`. `k = 0` is vacuously true.
    pub fn uncensored_through(&self, k: usize) -> bool {
        self.a.iter().take(k).all(|&a| a)
    }

    /// True iff `Y_1 = ... = Y_k = 1` with every entry observed.
    pub fn survived_through(&self, k: usize) -> bool {
        if k > self.y.len() {
            return false;
        }
        self.y.iter().take(k).all(|y| *y == Some(true))
    }

    /// Hazard risk set membership at `k`: Ā_k = Ȳ_{k-1} = 1.
    pub fn at_risk_hazard(&self, k: usize) -> bool {
        self.uncensored_through(k) && self.survived_through(k - 1)
    }

    /// Censoring risk set membership at `k`: Ā_{k-1} = Ȳ_{k-1} = 1.
    pub fn at_risk_censoring(&self, k: usize) -> bool {
        self.uncensored_through(k - 1) && self.survived_through(k - 1)
    }

    /// Surrogate history (S_1, ..., S_m). Only call when the history is
    /// observed, i.e. the subject survived uncensored through `m`.
    pub fn s_hist(&self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|j| self.s[j].expect("surrogate history requested beyond observation"))
            .collect()
    }

    /// Y_k as 0/1; only valid while the subject is uncensored through `k`.
    pub fn y_at(&self, k: usize) -> f64 {
        match self.y[k - 1] {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => panic!("Y_{k} requested but unobserved"),
        }
    }
}

/// The full analysis dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub grid: TimeGrid,
    pub subjects: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn arm_size(&self, g: u8) -> usize {
        self.subjects.iter().filter(|s| s.g == g).count()
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: Option<String>,
    pub field: String,
    pub message: String,
}

/// Check every record and dataset invariant; an empty list means valid.
pub fn validate(dataset: &LongitudinalDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let t = dataset.grid.t();
    let t0 = dataset.grid.t0();
    let p = dataset.n_covariates();

    for subj in &dataset.subjects {
        let sid = Some(subj.id.clone());
        if subj.x.len() != p {
            out.push(Violation {
                subject_id: sid.clone(),
                field: "x".into(),
                message: format!("covariate dimension {} != {}", subj.x.len(), p),
            });
        }
        if subj.x.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                subject_id: sid.clone(),
                field: "x".into(),
                message: "non-finite covariate".into(),
            });
        }
        if subj.g > 1 {
            out.push(Violation {
                subject_id: sid.clone(),
                field: "g".into(),
                message: format!("treatment indicator {} not in {{0,1}}", subj.g),
            });
        }
        if subj.a.len() != t || subj.y.len() != t || subj.s.len() != t0 {
            out.push(Violation {
                subject_id: sid.clone(),
                field: "a/y/s".into(),
                message: format!(
                    "trajectory lengths (a={}, y={}, s={}) do not match grid (t={t}, t0={t0})",
                    subj.a.len(),
                    subj.y.len(),
                    subj.s.len()
                ),
            });
            continue;
        }

        for k in 2..=t {
            if subj.a[k - 1] && !subj.a[k - 2] {
                out.push(Violation {
                    subject_id: sid.clone(),
                    field: "a".into(),
                    message: format!("censoring non-monotone at k={k}"),
                });
            }
        }
        // Entries after the first event are ignored by every operation, so
        // presence/monotonicity rules apply only up to and including it.
        let event_at = (1..=t).find(|&k| subj.a[k - 1] && subj.y[k - 1] == Some(false));
        let checked_through = event_at.unwrap_or(t);
        for k in 1..=checked_through {
            let observed = subj.y[k - 1].is_some();
            if observed != subj.a[k - 1] {
                out.push(Violation {
                    subject_id: sid.clone(),
                    field: "y".into(),
                    message: format!(
                        "y_{k} {} while a_{k} = {}",
                        if observed { "present" } else { "missing" },
                        u8::from(subj.a[k - 1])
                    ),
                });
            }
        }
        for k in 1..=t0.min(checked_through) {
            let should_have_s = subj.a[k - 1] && subj.y[k - 1] == Some(true);
            match (subj.s[k - 1].is_some(), should_have_s) {
                (true, false) => out.push(Violation {
                    subject_id: sid.clone(),
                    field: "s".into(),
                    message: format!("surrogate present for non-survivor at k={k}"),
                }),
                (false, true) => out.push(Violation {
                    subject_id: sid.clone(),
                    field: "s".into(),
                    message: format!("surrogate missing for uncensored survivor at k={k}"),
                }),
                _ => {}
            }
            if let Some(v) = subj.s[k - 1] {
                if !v.is_finite() {
                    out.push(Violation {
                        subject_id: sid.clone(),
                        field: "s".into(),
                        message: format!("non-finite surrogate at k={k}"),
                    });
                }
            }
        }
    }

    let mut ids: Vec<&str> = dataset.subjects.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            out.push(Violation {
                subject_id: Some(w[0].to_string()),
                field: "id".into(),
                message: "duplicate subject id".into(),
            });
        }
    }
    for g in [0u8, 1u8] {
        if dataset.arm_size(g) == 0 {
            out.push(Violation {
                subject_id: None,
                field: "g".into(),
                message: format!("treatment arm {g} is empty"),
            });
        }
    }
    out
}

/// Which conditioning event a risk-set query targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskSetKind {
    /// Ā_k = Ȳ_{k-1} = 1 (the set a hazard model is fitted on).
    Hazard,
    /// Ā_{k-1} = Ȳ_{k-1} = 1 (the set a censoring model is fitted on).
    Censoring,
}

/// Subject indices satisfying the requested conditioning event at time `k`,
/// optionally intersected with one treatment arm.
pub fn risk_set(
    dataset: &LongitudinalDataset,
    k: usize,
    kind: RiskSetKind,
    arm: Option<u8>,
) -> Result<Vec<usize>, DataError> {
    if k < 1 || k > dataset.grid.t() {
        return Err(DataError::TimeOutOfRange {
            k,
            t: dataset.grid.t(),
        });
    }
    Ok(dataset
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| match kind {
            RiskSetKind::Hazard => s.at_risk_hazard(k),
            RiskSetKind::Censoring => s.at_risk_censoring(k),
        })
        .filter(|(_, s)| arm.is_none_or(|g| s.g == g))
        .map(|(i, _)| i)
        .collect())
}

/// A reproducible partition of subjects into cross-fitting folds,
/// stratified by treatment arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    /// Fold index per subject, aligned with `LongitudinalDataset::subjects`.
    pub fold_of: Vec<usize>,
    /// The same assignment keyed by subject id.
    pub fold_of_id: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn complement_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assign subjects to `n_folds` folds uniformly at random within each
/// treatment arm. Deterministic in `(dataset order, n_folds, seed)`.
pub fn make_folds(
    dataset: &LongitudinalDataset,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, DataError> {
    let n = dataset.n();
    if n_folds < 2 || n_folds > n {
        return Err(DataError::InvalidFolds { n_folds, n });
    }
    for g in [0u8, 1u8] {
        if dataset.arm_size(g) == 0 {
            return Err(DataError::EmptyArm(g));
        }
    }
    let mut fold_of = vec![0usize; n];
    let mut offset = 0usize;
    for g in [0u8, 1u8] {
        let members: Vec<usize> = dataset
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.g == g)
            .map(|(i, _)| i)
            .collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        // Fisher–Yates with a splitmix-derived stream per arm.
        let mut state = crate::simulation::derive_seed(seed, 0x464f_4c44 ^ g as u64);
        for i in (1..order.len()).rev() {
            state = crate::simulation::splitmix64(state);
            let j = (state % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for (rank, &slot) in order.iter().enumerate() {
            // Continue the round-robin across arms so fold sizes stay within one.
            fold_of[members[slot]] = (offset + rank) % n_folds;
        }
        offset += members.len();
    }
    let fold_of_id = dataset
        .subjects
        .iter()
        .zip(&fold_of)
        .map(|(s, &f)| (s.id.clone(), f))
        .collect();
    Ok(FoldAssignment {
        n_folds,
        seed,
        fold_of,
        fold_of_id,
    })
}
