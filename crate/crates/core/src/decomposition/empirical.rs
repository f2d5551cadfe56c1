use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::decomposition::rank::{
    nominal_curvature_coefficient, occupancy_probability, rank_coefficient_mc,
};
use crate::error::{Error, Result};
use crate::forecaster::{fit_tail, fit_transformed, top_k, PlottingScheme, ScoreTransform};
use crate::par::{run_trials, Execution, McStats};
use crate::rng::{derive_seed, StreamRng};
use crate::tailmodel::TailDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorTarget {
    #[default]
    RealizedMax,
    PopulationQuantile,
}

/// How fit and deploy sets are drawn from a known distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitSampler {
    /// Draw only the needed top order statistics, exactly.
    #[default]
    OrderStatistics,
    /// Materialise every sample.
    Full,
}

/// How fit and deploy sets are drawn from a finite score list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreSampler {
    #[default]
    WithReplacement,
    /// Disjoint fit/deploy sets drawn without replacement.
    PartitionPermutation,
}

#[derive(Debug, Clone, Copy)]
pub enum DecompositionInput<'a> {
    Distribution(&'a TailDistribution),
    Scores(&'a [f64]),
}

fn deepest_depth(n: usize) -> f64 {
    PlottingScheme::Weibull.depth(1, n)
}

fn check_sizes(m: usize, n: usize, k: usize) -> Result<()> {
    if k < 2 || k > m {
        return Err(Error::InvalidTopCount { k, m });
    }
    if n <= m {
        return Err(Error::InvalidParameter(format!("deploy size {n} must exceed fit size {m}")));
    }
    Ok(())
}

/// Mean of `Q(y_1) - target` over independent fit/deploy draws, in score
/// units. `y_1` is the deepest Weibull depth of the deployment.
#[allow(clippy::too_many_arguments)]
pub fn estimator_error_mc(
    dist: &TailDistribution,
    m: usize,
    n: usize,
    k: usize,
    trials: u64,
    target: EstimatorTarget,
    sampler: FitSampler,
    exec: Execution,
    seed: u64,
) -> Result<McStats> {
    check_sizes(m, n, k)?;
    let y = deepest_depth(n);
    let population = match target {
        EstimatorTarget::PopulationQuantile => dist.quantile_at_depth((n as f64).ln())?,
        EstimatorTarget::RealizedMax => f64::NAN,
    };
    run_trials(exec, seed, trials, |rng| {
        let top = match sampler {
            FitSampler::OrderStatistics => dist.sample_top(m, k, rng)?,
            FitSampler::Full => top_k(&dist.sample(m, rng), k)?,
        };
        let fit = fit_tail(&top, m, PlottingScheme::Weibull, ScoreTransform::Identity)?;
        let truth = match (target, sampler) {
            (EstimatorTarget::PopulationQuantile, _) => population,
            (EstimatorTarget::RealizedMax, FitSampler::OrderStatistics) => dist.sample_max(n, rng)?,
            (EstimatorTarget::RealizedMax, FitSampler::Full) => {
                (0..n).map(|_| dist.sample_one(rng)).fold(f64::NEG_INFINITY, f64::max)
            }
        };
        Ok(fit.predict_at_depth(y) - truth)
    })
}

/// Mean of `Q(y_1) - realized max` when fit and deploy sets are resampled
/// from `scores`.
fn resample_error_mc(
    scores: &[f64],
    m: usize,
    n: usize,
    k: usize,
    trials: u64,
    sampler: ScoreSampler,
    exec: Execution,
    seed: u64,
) -> Result<McStats> {
    check_sizes(m, n, k)?;
    if scores.is_empty() {
        return Err(Error::InsufficientData("empty score list".into()));
    }
    if sampler == ScoreSampler::PartitionPermutation && scores.len() < m + n {
        return Err(Error::InsufficientData(format!(
            "partition sampling needs {} scores, have {}",
            m + n,
            scores.len()
        )));
    }
    let y = deepest_depth(n);
    run_trials(exec, seed, trials, |rng: &mut StreamRng| {
        let (fit_side, deploy_max) = match sampler {
            ScoreSampler::WithReplacement => {
                let fit: Vec<f64> = (0..m).map(|_| scores[rng.random_range(0..scores.len())]).collect();
                let max = (0..n).map(|_| scores[rng.random_range(0..scores.len())]).fold(f64::NEG_INFINITY, f64::max);
                (fit, max)
            }
            ScoreSampler::PartitionPermutation => {
                let idx = index::sample(rng, scores.len(), m + n).into_vec();
                let fit: Vec<f64> = idx[..m].iter().map(|&i| scores[i]).collect();
                let max = idx[m..].iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                (fit, max)
            }
        };
        let top = top_k(&fit_side, k)?;
        let fit = fit_transformed(&top, m, PlottingScheme::Weibull, ScoreTransform::Identity)?;
        Ok(fit.predict_at_depth(y) - deploy_max)
    })
}

/// Local quadratic estimate of the tail-quantile curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalQuadratic {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub count: usize,
}

/// Least-squares quadratic of score on Weibull depth over the order
/// statistics with depth in `[y - delta, y + delta]`.
pub fn local_quadratic_fit(sorted_desc: &[f64], y: f64, delta: f64) -> Result<LocalQuadratic> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("window half-width must be > 0, got {delta}")));
    }
    let n = sorted_desc.len();
    let window: Vec<(f64, f64)> = sorted_desc
        .iter()
        .enumerate()
        .map(|(i, &x)| (PlottingScheme::Weibull.depth(i + 1, n) - y, x))
        .filter(|(u, _)| u.abs() <= delta)
        .collect();
    if window.len() < 5 {
        return Err(Error::TooFewPoints { needed: 5, found: window.len() });
    }
    let design = DMatrix::from_fn(window.len(), 3, |r, c| window[r].0.powi(c as i32));
    let rhs = DVector::from_iterator(window.len(), window.iter().map(|w| w.1));
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidParameter(format!("local quadratic solve failed: {e}")))?;
    Ok(LocalQuadratic { q0: coef[0], q1: coef[1], q2: 2.0 * coef[2], count: window.len() })
}

/// Mean of `(max of L rare draws - max of N - L bulk draws)_+` with
/// `L ~ Binomial(N, eps)` conditioned on `L >= 1`.
pub fn occupancy_gap_mc(
    bulk: &TailDistribution,
    rare: &TailDistribution,
    eps: f64,
    n: usize,
    trials: u64,
    exec: Execution,
    seed: u64,
) -> Result<McStats> {
    if !(eps > 0.0 && eps < 1.0) || n == 0 {
        return Err(Error::InvalidParameter("occupancy gap needs 0 < eps < 1 and n >= 1".into()));
    }
    let nf = n as f64;
    let z = -(nf * (-eps).ln_1p()).exp_m1();
    let p1 = (nf.ln() + eps.ln() + (nf - 1.0) * (-eps).ln_1p()).exp() / z;
    let ratio = eps / (1.0 - eps);
    run_trials(exec, seed, trials, |rng| {
        let u: f64 = rng.random();
        let (mut l, mut p, mut cum) = (1usize, p1, p1);
        while cum < u && l < n {
            p *= (nf - l as f64) / (l as f64 + 1.0) * ratio;
            l += 1;
            cum += p;
        }
        let rare_max = rare.sample_max(l, rng)?;
        let bulk_max = if l < n { bulk.sample_max(n - l, rng)? } else { f64::NEG_INFINITY };
        Ok((rare_max - bulk_max).max(0.0))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub trials: u64,
    pub rank_trials: u64,
    pub delta: f64,
    pub sampler: ScoreSampler,
    pub fit_sampler: FitSampler,
    pub exec: Execution,
    pub seed: u64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            m: 5000,
            n: 50_000,
            k: 10,
            trials: 100_000,
            rank_trials: 1_000_000,
            delta: 0.5,
            sampler: ScoreSampler::WithReplacement,
            fit_sampler: FitSampler::OrderStatistics,
            exec: Execution::Parallel,
            seed: 0,
        }
    }
}

/// One value per component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentErrors {
    pub rank: f64,
    pub curvature: f64,
    pub occupancy: f64,
    pub residual: f64,
    pub empirical_total: f64,
}

/// Components in units of `q'(y_M)`; `q1_hat` converts to score units.
/// `rank + curvature - occupancy + residual == empirical_total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionReport {
    pub rank: f64,
    pub curvature: f64,
    pub occupancy: f64,
    pub residual: f64,
    pub empirical_total: f64,
    pub q1_hat: f64,
    pub q2_hat: f64,
    pub se: ComponentErrors,
}

impl DecompositionReport {
    /// `(component, q'-units, score units, se in q'-units)`.
    pub fn rows(&self) -> Vec<(&'static str, f64, f64, f64)> {
        let s = self.q1_hat;
        vec![
            ("rank", self.rank, self.rank * s, self.se.rank),
            ("curvature", self.curvature, self.curvature * s, self.se.curvature),
            ("occupancy", self.occupancy, self.occupancy * s, self.se.occupancy),
            ("residual", self.residual, self.residual * s, self.se.residual),
            ("empirical_total", self.empirical_total, self.empirical_total * s, self.se.empirical_total),
        ]
    }
}

fn sorted_copy(scores: &[f64]) -> Result<Vec<f64>> {
    let mut v = scores.to_vec();
    crate::forecaster::sort_descending(&mut v)?;
    Ok(v)
}

/// `(q1, q2)` at depth `ln m`: analytic (or numerically differentiated)
/// for distributions, local quadratic for score lists.
fn tail_slope(input: DecompositionInput<'_>, m: usize, delta: f64) -> Result<(f64, f64)> {
    let y = (m as f64).ln();
    match input {
        DecompositionInput::Distribution(d) => {
            let p = d.quantile_curve(y)?;
            Ok((p.q1, p.q2))
        }
        DecompositionInput::Scores(s) => {
            let lq = local_quadratic_fit(&sorted_copy(s)?, y, delta)?;
            Ok((lq.q1, lq.q2))
        }
    }
}

fn total_error(input: DecompositionInput<'_>, cfg: &DecompositionConfig, k: usize, seed: u64) -> Result<McStats> {
    match input {
        DecompositionInput::Distribution(d) => estimator_error_mc(
            d,
            cfg.m,
            cfg.n,
            k,
            cfg.trials,
            EstimatorTarget::RealizedMax,
            cfg.fit_sampler,
            cfg.exec,
            seed,
        ),
        DecompositionInput::Scores(s) => resample_error_mc(s, cfg.m, cfg.n, k, cfg.trials, cfg.sampler, cfg.exec, seed),
    }
}

pub fn empirical_decomposition(input: DecompositionInput<'_>, cfg: &DecompositionConfig) -> Result<DecompositionReport> {
    check_sizes(cfg.m, cfg.n, cfg.k)?;
    let (q1, q2) = tail_slope(input, cfg.m, cfg.delta)?;
    if !(q1 > 0.0) {
        return Err(Error::InvalidParameter(format!("estimated q' must be positive, got {q1}")));
    }
    let big_r = cfg.n as f64 / cfg.m as f64;
    let r = big_r.ln();

    let rank = rank_coefficient_mc(cfg.k, big_r, cfg.rank_trials, cfg.exec, derive_seed(cfg.seed, "rank"))?;
    let curvature = nominal_curvature_coefficient(cfg.k, r)? * q2 / (2.0 * q1);
    let total = total_error(input, cfg, cfg.k, derive_seed(cfg.seed, "total"))?;

    let (occupancy, occupancy_se) = match input {
        DecompositionInput::Distribution(d) => match d.mixture_parts() {
            Some((bulk, rare, eps)) if eps > 0.0 => {
                let p = occupancy_probability(cfg.m as u64, cfg.n as u64, eps)?.exact;
                let gap = occupancy_gap_mc(&bulk, &rare, eps, cfg.n, cfg.trials, cfg.exec, derive_seed(cfg.seed, "occupancy"))?;
                (p * gap.mean() / q1, p * gap.se() / q1)
            }
            _ => (0.0, 0.0),
        },
        DecompositionInput::Scores(_) => (0.0, 0.0),
    };

    let empirical_total = total.mean() / q1;
    let residual = empirical_total - rank.b_inv - curvature + occupancy;
    let total_se = total.se() / q1;
    let se = ComponentErrors {
        rank: rank.se,
        curvature: 0.0,
        occupancy: occupancy_se,
        residual: (total_se.powi(2) + rank.se.powi(2) + occupancy_se.powi(2)).sqrt(),
        empirical_total: total_se,
    };
    Ok(DecompositionReport {
        rank: rank.b_inv,
        curvature,
        occupancy,
        residual,
        empirical_total,
        q1_hat: q1,
        q2_hat: q2,
        se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSweepRow {
    pub k: usize,
    /// Mean error against the realized maximum, in `q'` units.
    pub mean_error: f64,
    pub se: f64,
    /// Rank coefficient `b_inv(k, R)` for reference.
    pub rank_theory: f64,
}

/// Mean forecast error across top-counts at fixed deployment ratio.
pub fn k_sweep(
    input: DecompositionInput<'_>,
    m: usize,
    big_r: f64,
    k_list: &[usize],
    trials: u64,
    rank_trials: u64,
    exec: Execution,
    seed: u64,
) -> Result<Vec<KSweepRow>> {
    if let Some(&k) = k_list.iter().find(|&&k| k > m || k < 2) {
        return Err(Error::InvalidTopCount { k, m });
    }
    let n = (m as f64 * big_r).round() as usize;
    let cfg = DecompositionConfig { m, n, trials, rank_trials, exec, seed, ..Default::default() };
    let (q1, _) = tail_slope(input, m, cfg.delta)?;
    k_list
        .iter()
        .map(|&k| {
            let s = total_error(input, &cfg, k, derive_seed(seed, &format!("ksweep-{k}")))?;
            let theory = if rank_trials > 0 {
                rank_coefficient_mc(k, big_r, rank_trials, exec, derive_seed(seed, &format!("ksweep-rank-{k}")))?.b_inv
            } else {
                f64::NAN
            };
            Ok(KSweepRow { k, mean_error: s.mean() / q1, se: s.se() / q1, rank_theory: theory })
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn quadratic_recovered_exactly() {
        let n = 100_000;
        let xs: Vec<f64> = (1..=n).map(|i| PlottingScheme::Weibull.depth(i, n).powi(2)).collect();
        let y = 5000f64.ln();
        let lq = local_quadratic_fit(&xs, y, 0.5).unwrap();
        assert!((lq.q1 - 2.0 * y).abs() < 1e-8, "{}", lq.q1);
        assert!((lq.q2 - 2.0).abs() < 1e-8, "{}", lq.q2);
        assert!((lq.q0 - y * y).abs() < 1e-8);
    }

    #[test]
    fn local_quadratic_on_exp_samples() {
        // Single-draw scatter is ~0.07 on q1 and ~0.3 on q2, so average 20
        // draws of the top of 1e6 samples (only ranks <= 400 enter the window).
        let d = TailDistribution::exp(1.0).unwrap();
        let mut rng = stream(8, 0);
        let (mut q1, mut q2) = (0.0, 0.0);
        for _ in 0..20 {
            let top = d.sample_top(1_000_000, 400, &mut rng).unwrap();
            let mut xs = top.clone();
            xs.extend(std::iter::repeat_n(top[399] - 1.0, 1_000_000 - 400));
            let lq = local_quadratic_fit(&xs, 5000f64.ln(), 0.5).unwrap();
            q1 += lq.q1 / 20.0;
            q2 += lq.q2 / 20.0;
        }
        assert!((q1 - 1.0).abs() < 0.1, "{q1}");
        assert!(q2.abs() < 0.5, "{q2}");
    }

    #[test]
    fn local_quadratic_needs_five_points() {
        let xs = [5.0, 4.0, 3.0, 2.0];
        assert!(matches!(local_quadratic_fit(&xs, 1.0, 10.0), Err(Error::TooFewPoints { needed: 5, found: 4 })));
    }

    #[test]
    fn full_and_order_statistic_samplers_agree() {
        let d = TailDistribution::exp(1.0).unwrap();
        let run = |s| estimator_error_mc(&d, 500, 5000, 10, 20_000, EstimatorTarget::RealizedMax, s, Execution::Parallel, 4).unwrap();
        let a = run(FitSampler::OrderStatistics);
        let b = run(FitSampler::Full);
        let se = (a.se().powi(2) + b.se().powi(2)).sqrt();
        assert!((a.mean() - b.mean()).abs() < 4.0 * se, "{} vs {}", a.mean(), b.mean());
    }

    #[test]
    fn occupancy_gap_is_positive() {
        let bulk = TailDistribution::exp(1.0).unwrap();
        let rare = TailDistribution::shifted_exp(1.0, 4.0).unwrap();
        let g = occupancy_gap_mc(&bulk, &rare, 2e-5, 50_000, 5_000, Execution::Parallel, 1).unwrap();
        assert!(g.mean() > 0.0);
    }

    #[test]
    fn closure_holds() {
        let d = TailDistribution::headline_mixture(4.0, 2e-5).unwrap();
        let cfg = DecompositionConfig { trials: 4096, rank_trials: 4096, ..Default::default() };
        let r = empirical_decomposition(DecompositionInput::Distribution(&d), &cfg).unwrap();
        assert!((r.rank + r.curvature - r.occupancy + r.residual - r.empirical_total).abs() < 1e-12);
        assert!(r.occupancy > 0.0);
        for (_, q, s, _) in r.rows() {
            assert!((q * r.q1_hat - s).abs() < 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn partition_sampler_needs_enough_data() {
        let xs: Vec<f64> = (0..100).map(f64::from).collect();
        let cfg = DecompositionConfig { m: 50, n: 80, k: 5, trials: 10, rank_trials: 10, sampler: ScoreSampler::PartitionPermutation, ..Default::default() };
        assert!(matches!(
            empirical_decomposition(DecompositionInput::Scores(&xs), &cfg),
            Err(Error::InsufficientData(_)) | Err(Error::TooFewPoints { .. })
        ));
    }
}
