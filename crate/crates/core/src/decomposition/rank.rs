use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::par::{run_trials_multi, Execution};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_61;

/// `a_j = -ln j`, j = 1..=k.
pub fn nominal_offsets(k: usize) -> Vec<f64> {
    (1..=k).map(|j| -(j as f64).ln()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Centered {
    a: Vec<f64>,
    a_bar: f64,
}

impl Centered {
    fn new(k: usize) -> Self {
        let a = nominal_offsets(k);
        let a_bar = mean(&a);
        Centered { a: a.iter().map(|x| x - a_bar).collect(), a_bar }
    }
}

fn check_len(t: &[f64]) -> Result<()> {
    if t.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: t.len() });
    }
    Ok(())
}

fn functional_with(c: &Centered, t: &[f64], r: f64) -> Result<f64> {
    let t_bar = mean(t);
    let (mut a_sum, mut b_sum) = (0.0, 0.0);
    for (&tj, &aj) in t.iter().zip(&c.a) {
        let d = tj - t_bar;
        a_sum += aj * d;
        b_sum += d * d;
    }
    if a_sum == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(t_bar + (r - c.a_bar) * b_sum / a_sum)
}

/// `I_r(t) = t_bar + (r - a_bar) B(t) / A(t)`: the depth-`r` prediction of
/// the inverse fit when the top-k offsets are `t`.
pub fn offset_functional(t: &[f64], r: f64) -> Result<f64> {
    check_len(t)?;
    functional_with(&Centered::new(t.len()), t, r)
}

/// Directional derivative `D I_r(t)[v]`.
pub fn offset_functional_derivative(t: &[f64], v: &[f64], r: f64) -> Result<f64> {
    check_len(t)?;
    if v.len() != t.len() {
        return Err(Error::InvalidParameter("direction length differs from offsets".into()));
    }
    let c = Centered::new(t.len());
    let (t_bar, v_bar) = (mean(t), mean(v));
    let (mut a_sum, mut b_sum, mut db, mut da) = (0.0, 0.0, 0.0, 0.0);
    for ((&tj, &vj), &aj) in t.iter().zip(v).zip(&c.a) {
        let dt = tj - t_bar;
        let dv = vj - v_bar;
        a_sum += aj * dt;
        b_sum += dt * dt;
        db += 2.0 * dt * dv;
        da += aj * dv;
    }
    if a_sum == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(v_bar + (r - c.a_bar) * (db * a_sum - b_sum * da) / (a_sum * a_sum))
}

/// Limiting top-k offsets `T_j = -ln Gamma_j` and a standard Gumbel `zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankLimitDraw {
    pub t: Vec<f64>,
    pub zeta: f64,
}

impl RankLimitDraw {
    pub fn sample<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let mut g = 0.0;
        let t = (0..k)
            .map(|_| {
                let e: f64 = Exp1.sample(rng);
                g += e;
                -g.ln()
            })
            .collect();
        let e: f64 = Exp1.sample(rng);
        RankLimitDraw { t, zeta: -e.ln() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCoefficient {
    /// Against the realized deployment maximum.
    pub b_inv: f64,
    /// Against the population quantile.
    pub b_inv_tilde: f64,
    pub se: f64,
    pub trials: u64,
}

/// Monte Carlo of the rank coefficient for top-count `k` and deployment
/// ratio `big_r`. Depends on nothing but `(k, big_r)` and the seed.
pub fn rank_coefficient_mc(k: usize, big_r: f64, trials: u64, exec: Execution, seed: u64) -> Result<RankCoefficient> {
    if k < 2 {
        return Err(Error::InvalidTopCount { k, m: k });
    }
    if !(big_r > 1.0) || !big_r.is_finite() {
        return Err(Error::InvalidParameter(format!("deployment ratio must exceed 1, got {big_r}")));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let r = big_r.ln();
    let c = Centered::new(k);
    let [s] = run_trials_multi::<1, _>(exec, seed, trials, |rng| {
        let d = RankLimitDraw::sample(k, rng);
        Ok([functional_with(&c, &d.t, r)? - r])
    })?;
    Ok(RankCoefficient { b_inv: s.mean() - EULER_GAMMA, b_inv_tilde: s.mean(), se: s.se(), trials })
}

/// `D I_r(a)[a^2] - r^2`: the error of extrapolating the nominal `u^2`
/// curve with the top-k line. Negative for `r >= 0`.
pub fn nominal_curvature_coefficient(k: usize, r: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidTopCount { k, m: k });
    }
    let a = nominal_offsets(k);
    let sq: Vec<f64> = a.iter().map(|x| x * x).collect();
    Ok(offset_functional_derivative(&a, &sq, r)? - r * r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyProbability {
    pub exact: f64,
    pub approx: f64,
}

/// Probability that the rare mode is absent from `m` fit draws yet present
/// among `n` deploy draws.
pub fn occupancy_probability(m: u64, n: u64, eps: f64) -> Result<OccupancyProbability> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidParameter(format!("epsilon must be in [0, 1), got {eps}")));
    }
    let l = (-eps).ln_1p();
    let exact = (m as f64 * l).exp() * -(n as f64 * l).exp_m1();
    let approx = (-(m as f64) * eps).exp() * -(-(n as f64) * eps).exp_m1();
    Ok(OccupancyProbability { exact, approx })
}
