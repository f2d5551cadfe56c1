use crate::decomposition::empirical::local_quadratic_fit;
use crate::error::{Error, Result};
use crate::forecaster::{sort_descending, PlottingScheme};

/// One grid point of the hazard diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardRow {
    pub score: f64,
    /// Fraction of scores strictly above `score`.
    pub survival: f64,
    /// `ln h` from finite differences of `-ln S`; `None` where undefined.
    pub log_hazard: Option<f64>,
    /// Scores in `[score, next grid point)`; the last bin is open above.
    pub count: usize,
}

/// Empirical survival, finite-difference log hazard and histogram on an
/// increasing score grid.
pub fn hazard_diagnostic(scores: &[f64], grid: &[f64]) -> Result<Vec<HazardRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    if scores.len() < 1000 {
        return Err(Error::TooFewPoints { needed: 1000, found: scores.len() });
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
    }
    let mut asc = scores.to_vec();
    sort_descending(&mut asc)?;
    asc.reverse();
    let n = asc.len() as f64;
    let above = |g: f64| asc.len() - asc.partition_point(|&x| x <= g);
    let surv: Vec<f64> = grid.iter().map(|&g| above(g) as f64 / n).collect();
    let cum: Vec<f64> = surv.iter().map(|&s| if s > 0.0 { -s.ln() } else { f64::NAN }).collect();

    let last = grid.len() - 1;
    Ok((0..grid.len())
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(last));
            let log_hazard = if hi > lo {
                let h = (cum[hi] - cum[lo]) / (grid[hi] - grid[lo]);
                (h > 0.0 && h.is_finite()).then(|| h.ln())
            } else {
                None
            };
            let lower = asc.partition_point(|&x| x < grid[i]);
            let upper = if i < last { asc.partition_point(|&x| x < grid[i + 1]) } else { asc.len() };
            HazardRow { score: grid[i], survival: surv[i], log_hazard, count: upper - lower }
        })
        .collect())
}

fn tail_quantile(side: &[f64], depth: f64) -> Result<f64> {
    if side.is_empty() {
        return Err(Error::InsufficientData("empty score list".into()));
    }
    let mut v = side.to_vec();
    sort_descending(&mut v)?;
    if let Ok(lq) = local_quadratic_fit(&v, depth, 0.5) {
        return Ok(lq.q0);
    }
    // Order statistic whose Weibull depth is closest to the target.
    let n = v.len();
    let i = ((n as f64 + 1.0) * (-depth).exp()).round() as usize;
    if i < 1 || i > n {
        return Err(Error::InsufficientData(format!("depth {depth} unreachable with {n} scores")));
    }
    debug_assert!(PlottingScheme::Weibull.depth(i, n).is_finite());
    Ok(v[i - 1])
}

/// `q_fit(depth) - q_deploy(depth)`.
pub fn split_mismatch(fit_scores: &[f64], deploy_scores: &[f64], depth: f64) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::InvalidParameter(format!("depth must be > 0, got {depth}")));
    }
    Ok(tail_quantile(fit_scores, depth)? - tail_quantile(deploy_scores, depth)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tailmodel::TailDistribution;

    fn log_hazards(d: &TailDistribution, grid: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0);
        let xs = d.sample(200_000, &mut rng);
        hazard_diagnostic(&xs, grid).unwrap().iter().map(|r| r.log_hazard.unwrap()).collect()
    }

    #[test]
    fn exp_hazard_is_flat() {
        let grid: Vec<f64> = (1..=16).map(|i| 0.25 * i as f64).collect();
        for lh in log_hazards(&TailDistribution::exp(1.0).unwrap(), &grid, 1) {
            assert!(lh.abs() < 0.2, "{lh}");
        }
    }

    #[test]
    fn uniform_hazard_rises_and_pareto_falls() {
        let grid: Vec<f64> = (1..=9).map(|i| 0.1 * i as f64).collect();
        let u = log_hazards(&TailDistribution::uniform(0.0, 1.0).unwrap(), &grid, 2);
        assert!(u.windows(2).all(|w| w[1] > w[0]), "{u:?}");
        let grid: Vec<f64> = (0..8).map(|i| 1.1 + 0.3 * i as f64).collect();
        let p = log_hazards(&TailDistribution::pareto(3.0, 1.0).unwrap(), &grid, 3);
        assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
    }

    #[test]
    fn hazard_rejects_bad_input() {
        assert!(hazard_diagnostic(&[1.0; 2000], &[]).is_err());
        assert!(hazard_diagnostic(&[1.0; 10], &[0.5]).is_err());
    }

    #[test]
    fn histogram_counts_everything_above_first_point() {
        let xs: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let rows = hazard_diagnostic(&xs, &[0.0, 0.5]).unwrap();
        assert_eq!(rows[0].count + rows[1].count, 2000);
        assert_eq!(rows[1].count, 1000);
    }

    #[test]
    fn split_mismatch_examples() {
        let d = TailDistribution::exp(1.0).unwrap();
        let mut rng = stream(6, 0);
        let a = d.sample(100_000, &mut rng);
        let b = d.sample(100_000, &mut rng);
        let depth = 1000f64.ln();
        assert!(split_mismatch(&a, &b, depth).unwrap().abs() < 0.1);
        let shifted: Vec<f64> = b.iter().map(|x| x - 1.0).collect();
        assert!((split_mismatch(&a, &shifted, depth).unwrap() - 1.0).abs() < 0.1);
        assert!(matches!(split_mismatch(&[], &b, depth), Err(Error::InsufficientData(_))));
    }
}
