//! A fully discrete benchmark process (binary covariate, binary surrogates,
//! three periods, surrogate horizon two) whose nuisance functions, effect
//! values, and reference distribution are all available in closed form by
//! enumeration.
//!
//! This is the workhorse for exactness and double-robustness checks: with
//! saturated designs every fitted nuisance must reproduce the empirical
//! cell means, and with these analytic nuisances injected the influence
//! functions can be tested against enumerated truths with no estimation
//! error in the way.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LongitudinalDataset, SubjectRecord, TimeGrid};
use crate::learners::expit;
use crate::nuisance::NuisanceOracle;
use crate::simulation::derive_seed;

/// Parameters of the discrete process. Time grid is fixed at t = 3, t0 = 2.
#[derive(Debug, Clone)]
pub struct ToyDgp {
    /// P(X = 1).
    pub p_x: f64,
    /// Treatment probability at X = 0 and X = 1.
    pub e0: f64,
    pub e1: f64,
    /// P(S_k = 1) logit coefficients (intercept, g, x, s_prev).
    pub s_coef: [f64; 4],
    /// Per-period survival logit coefficients (intercept, g, x, s_prev).
    pub y_coef: [f64; 4],
    /// Per-period retention (non-censoring) logit coefficients
    /// (intercept, g, x).
    pub c_coef: [f64; 3],
}

impl ToyDgp {
    pub fn standard() -> Self {
        ToyDgp {
            p_x: 0.5,
            e0: 0.45,
            e1: 0.65,
            s_coef: [-0.4, 0.9, 0.5, 0.7],
            y_coef: [1.1, 0.6, -0.5, -0.8],
            c_coef: [2.0, 0.3, -0.2],
        }
    }

    pub fn grid() -> TimeGrid {
        TimeGrid::new(3, 2).expect("static grid")
    }

    pub fn e(&self, x: f64) -> f64 {
        if x > 0.5 {
            self.e1
        } else {
            self.e0
        }
    }

    pub fn p_s(&self, g: f64, x: f64, s_prev: f64) -> f64 {
        expit(self.s_coef[0] + self.s_coef[1] * g + self.s_coef[2] * x + self.s_coef[3] * s_prev)
    }

    pub fn survival(&self, g: f64, x: f64, s_prev: f64) -> f64 {
        expit(self.y_coef[0] + self.y_coef[1] * g + self.y_coef[2] * x + self.y_coef[3] * s_prev)
    }

    pub fn retention(&self, g: f64, x: f64) -> f64 {
        expit(self.c_coef[0] + self.c_coef[1] * g + self.c_coef[2] * x)
    }

    /// s_prev entering time-k terms: 0 at k = 1, else the last surrogate at
    /// min(k - 1, t0).
    fn s_prev_at(hist: &[f64], k: usize) -> f64 {
        if k == 1 {
            0.0
        } else {
            hist[(k - 2).min(hist.len().saturating_sub(1))]
        }
    }

    /// Q_gk by enumeration over the arm-specific surrogate law.
    pub fn q(&self, g: f64, k: usize, x: f64, hist: &[f64]) -> f64 {
        match k {
            3 => 1.0,
            2 => {
                let s1 = hist[0];
                let p1 = self.p_s(g, x, s1);
                p1 * self.survival(g, x, 1.0) + (1.0 - p1) * self.survival(g, x, 0.0)
            }
            1 => {
                let p1 = self.p_s(g, x, 0.0);
                let term = |s1: f64, w: f64| w * self.survival(g, x, s1) * self.q(g, 2, x, &[s1]);
                term(1.0, p1) + term(0.0, 1.0 - p1)
            }
            _ => unreachable!("toy grid is t = 3"),
        }
    }

    /// Pooled mixture weight P(G = 1 | x, survivors at k, history):
    /// proportional to e_g * prod survival * prod surrogate density.
    pub fn pooled_w1(&self, k: usize, x: f64, hist: &[f64]) -> f64 {
        let weight = |g: f64| {
            let mut w: f64 = if g > 0.5 { self.e(x) } else { 1.0 - self.e(x) };
            for m in 1..=k {
                w *= self.survival(g, x, Self::s_prev_at(hist, m));
            }
            for m in 1..k {
                let p = self.p_s(g, x, Self::s_prev_at(hist, m));
                w *= if hist[m - 1] > 0.5 { p } else { 1.0 - p };
            }
            w
        };
        let w1 = weight(1.0);
        let w0 = weight(0.0);
        w1 / (w1 + w0)
    }

    /// Q*_gk by enumeration: the next surrogate value is drawn from the
    /// pooled mixture over arms.
    pub fn q_star(&self, g: f64, k: usize, x: f64, hist: &[f64]) -> f64 {
        match k {
            3 => 1.0,
            2 => {
                let w1 = self.pooled_w1(2, x, hist);
                let s1 = hist[0];
                let p_mix = w1 * self.p_s(1.0, x, s1) + (1.0 - w1) * self.p_s(0.0, x, s1);
                p_mix * self.survival(g, x, 1.0) + (1.0 - p_mix) * self.survival(g, x, 0.0)
            }
            1 => {
                let w1 = self.pooled_w1(1, x, &[]);
                let p_mix = w1 * self.p_s(1.0, x, 0.0) + (1.0 - w1) * self.p_s(0.0, x, 0.0);
                let term =
                    |s1: f64, w: f64| w * self.survival(g, x, s1) * self.q_star(g, 2, x, &[s1]);
                term(1.0, p_mix) + term(0.0, 1.0 - p_mix)
            }
            _ => unreachable!("toy grid is t = 3"),
        }
    }

    /// pi_k: P(G = 1 | x, survivors at k, full surrogate history through k).
    pub fn pi(&self, k: usize, x: f64, hist: &[f64]) -> f64 {
        let weight = |g: f64| {
            let mut w: f64 = if g > 0.5 { self.e(x) } else { 1.0 - self.e(x) };
            for m in 1..=k {
                w *= self.survival(g, x, Self::s_prev_at(hist, m));
            }
            for m in 1..=k {
                let p = self.p_s(g, x, Self::s_prev_at(hist, m));
                w *= if hist[m - 1] > 0.5 { p } else { 1.0 - p };
            }
            w
        };
        let w1 = weight(1.0);
        let w0 = weight(0.0);
        w1 / (w1 + w0)
    }

    /// True (Delta, Delta_S) by full enumeration.
    pub fn truth(&self) -> (f64, f64) {
        let mut delta = 0.0;
        let mut delta_s = 0.0;
        for (x, wx) in [(0.0, 1.0 - self.p_x), (1.0, self.p_x)] {
            let head = |g: f64| self.survival(g, x, 0.0) * self.q(g, 1, x, &[]);
            let head_star = |g: f64| self.survival(g, x, 0.0) * self.q_star(g, 1, x, &[]);
            delta += wx * (head(1.0) - head(0.0));
            delta_s += wx * (head_star(1.0) - head_star(0.0));
        }
        (delta, delta_s)
    }
}

/// Draw one observed dataset from the toy process.
pub fn generate_toy(
    dgp: &ToyDgp,
    n: usize,
    seed: u64,
    censoring: bool,
) -> LongitudinalDataset {
    let grid = ToyDgp::grid();
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x70f0 ^ i as u64));
        let x = f64::from(rng.gen::<f64>() < dgp.p_x);
        let g = u8::from(rng.gen::<f64>() < dgp.e(x));
        let gf = g as f64;
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        let mut alive = true;
        let mut uncensored = true;
        let mut s_prev = 0.0;
        for k in 1..=3usize {
            if censoring && uncensored {
                uncensored = rng.gen::<f64>() < dgp.retention(gf, x);
            }
            a.push(uncensored);
            if alive {
                alive = rng.gen::<f64>() < dgp.survival(gf, x, s_prev);
            }
            y.push(if uncensored { Some(alive) } else { None });
            if k <= 2 {
                if alive {
                    let sk = f64::from(rng.gen::<f64>() < dgp.p_s(gf, x, s_prev));
                    s.push(if uncensored { Some(sk) } else { None });
                    s_prev = sk;
                } else {
                    s.push(None);
                }
            }
        }
        subjects.push(SubjectRecord {
            id: format!("toy{i:06}"),
            x: vec![x],
            g,
            a,
            y,
            s,
        });
    }
    LongitudinalDataset {
        grid,
        subjects,
        covariate_names: vec!["x1".into()],
    }
}

/// Closed-form nuisances for the toy process, with switches that swap in
/// deliberately misspecified weight or outcome blocks. The wrong outcome
/// block still satisfies the nested-regression structure: the distorted Q*
/// is the enumeration of the distorted hazards under the true pooled
/// reference law.
pub struct ToyOracle {
    pub dgp: ToyDgp,
    pub wrong_weights: bool,
    pub wrong_outcomes: bool,
}

impl ToyOracle {
    pub fn correct(dgp: ToyDgp) -> Self {
        ToyOracle {
            dgp,
            wrong_weights: false,
            wrong_outcomes: false,
        }
    }

    fn wrong_survival(&self, g: f64, x: f64, s_prev: f64) -> f64 {
        expit(0.4 + 0.2 * g + 0.3 * x + 0.5 * s_prev)
    }

    fn wrong_q(&self, g: f64, k: usize, x: f64, hist: &[f64]) -> f64 {
        match k {
            3 => 1.0,
            2 => {
                let p1 = self.dgp.p_s(g, x, hist[0]);
                p1 * self.wrong_survival(g, x, 1.0) + (1.0 - p1) * self.wrong_survival(g, x, 0.0)
            }
            1 => {
                let p1 = self.dgp.p_s(g, x, 0.0);
                let term =
                    |s1: f64, w: f64| w * self.wrong_survival(g, x, s1) * self.wrong_q(g, 2, x, &[s1]);
                term(1.0, p1) + term(0.0, 1.0 - p1)
            }
            _ => unreachable!(),
        }
    }

    fn wrong_q_star(&self, g: f64, k: usize, x: f64, hist: &[f64]) -> f64 {
        match k {
            3 => 1.0,
            2 => {
                let w1 = self.dgp.pooled_w1(2, x, hist);
                let p_mix =
                    w1 * self.dgp.p_s(1.0, x, hist[0]) + (1.0 - w1) * self.dgp.p_s(0.0, x, hist[0]);
                p_mix * self.wrong_survival(g, x, 1.0) + (1.0 - p_mix) * self.wrong_survival(g, x, 0.0)
            }
            1 => {
                let w1 = self.dgp.pooled_w1(1, x, &[]);
                let p_mix = w1 * self.dgp.p_s(1.0, x, 0.0) + (1.0 - w1) * self.dgp.p_s(0.0, x, 0.0);
                let term = |s1: f64, w: f64| {
                    w * self.wrong_survival(g, x, s1) * self.wrong_q_star(g, 2, x, &[s1])
                };
                term(1.0, p_mix) + term(0.0, 1.0 - p_mix)
            }
            _ => unreachable!(),
        }
    }
}

impl NuisanceOracle for ToyOracle {
    fn e(&self, x: &[f64]) -> f64 {
        if self.wrong_weights {
            0.5
        } else {
            self.dgp.e(x[0])
        }
    }

    fn gamma(&self, g: u8, _k: usize, x: &[f64], _s: &[f64]) -> f64 {
        if self.wrong_weights {
            0.8
        } else {
            self.dgp.retention(g as f64, x[0])
        }
    }

    fn mu(&self, g: u8, k: usize, x: &[f64], s: &[f64]) -> f64 {
        let s_prev = if k == 1 { 0.0 } else { s[k - 2] };
        if self.wrong_outcomes {
            self.wrong_survival(g as f64, x[0], s_prev)
        } else {
            self.dgp.survival(g as f64, x[0], s_prev)
        }
    }

    fn q(&self, g: u8, k: usize, x: &[f64], s: &[f64]) -> f64 {
        if self.wrong_outcomes {
            self.wrong_q(g as f64, k, x[0], s)
        } else {
            self.dgp.q(g as f64, k, x[0], s)
        }
    }

    fn q_star(&self, g: u8, k: usize, x: &[f64], s: &[f64]) -> f64 {
        if self.wrong_outcomes {
            self.wrong_q_star(g as f64, k, x[0], s)
        } else {
            self.dgp.q_star(g as f64, k, x[0], s)
        }
    }

    fn pi(&self, k: usize, x: &[f64], s: &[f64]) -> f64 {
        if self.wrong_weights {
            0.55
        } else {
            self.dgp.pi(k, x[0], s)
        }
    }

    fn pi_star(&self, k: usize, x: &[f64], s: &[f64]) -> f64 {
        if self.wrong_weights {
            0.55
        } else {
            self.dgp.pooled_w1(k, x[0], s)
        }
    }
}
