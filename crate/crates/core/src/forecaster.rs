//! Gumbel-tail OLS forecaster.
//!
//! Regress `log S_i` on the transformed top-k scores `psi_i`, then read the
//! line off at deployment depth: `Q(n) = -(log n + b) / a`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlottingScheme {
    /// `i / M`
    Empirical,
    /// `i / (M + 1)`
    #[default]
    Weibull,
    /// `(i - 0.5) / M`
    Hazen,
    /// `(i - 0.44) / (M + 0.12)`
    Gringorten,
}

impl PlottingScheme {
    /// Survival estimate for rank `i` (1-based) out of `m`.
    pub fn survival(self, i: usize, m: usize) -> f64 {
        let (i, m) = (i as f64, m as f64);
        match self {
            PlottingScheme::Empirical => i / m,
            PlottingScheme::Weibull => i / (m + 1.0),
            PlottingScheme::Hazen => (i - 0.5) / m,
            PlottingScheme::Gringorten => (i - 0.44) / (m + 0.12),
        }
    }

    /// `-log S_i`.
    pub fn depth(self, i: usize, m: usize) -> f64 {
        -self.survival(i, m).ln()
    }
}

impl fmt::Display for PlottingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlottingScheme::Empirical => "empirical",
            PlottingScheme::Weibull => "weibull",
            PlottingScheme::Hazen => "hazen",
            PlottingScheme::Gringorten => "gringorten",
        })
    }
}

impl FromStr for PlottingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "empirical" => Ok(PlottingScheme::Empirical),
            "weibull" => Ok(PlottingScheme::Weibull),
            "hazen" => Ok(PlottingScheme::Hazen),
            "gringorten" => Ok(PlottingScheme::Gringorten),
            o => Err(Error::Parse(format!("unknown plotting scheme `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreTransform {
    #[default]
    Identity,
    /// `psi = -log(-log p)` for a probability score `p`.
    GumbelProb,
}

impl ScoreTransform {
    pub fn forward(self, x: f64) -> Result<f64> {
        let psi = match self {
            ScoreTransform::Identity => x,
            ScoreTransform::GumbelProb => {
                if !(x > 0.0 && x < 1.0) {
                    return Err(Error::NonFinite(format!("probability score {x} outside (0, 1)")));
                }
                -(-x.ln()).ln()
            }
        };
        if psi.is_finite() {
            Ok(psi)
        } else {
            Err(Error::NonFinite(format!("transformed score of {x}")))
        }
    }

    pub fn inverse(self, psi: f64) -> f64 {
        match self {
            ScoreTransform::Identity => psi,
            ScoreTransform::GumbelProb => (-(-psi).exp()).exp(),
        }
    }

    /// Map into the space residuals are measured in when leaving the
    /// transformed scale: `log p` for probability scores.
    pub fn to_loss_space(self, psi: f64) -> f64 {
        match self {
            ScoreTransform::Identity => psi,
            ScoreTransform::GumbelProb => -(-psi).exp(),
        }
    }

    /// Derivative of [`Self::to_loss_space`].
    pub fn to_loss_space_deriv(self, psi: f64) -> f64 {
        match self {
            ScoreTransform::Identity => 1.0,
            ScoreTransform::GumbelProb => (-psi).exp(),
        }
    }
}

impl fmt::Display for ScoreTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreTransform::Identity => "identity",
            ScoreTransform::GumbelProb => "gumbel-prob",
        })
    }
}

impl FromStr for ScoreTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(ScoreTransform::Identity),
            "gumbel-prob" | "gumbelprob" | "gumbel" => Ok(ScoreTransform::GumbelProb),
            o => Err(Error::Parse(format!("unknown score transform `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankWeighting {
    RankUniform,
    #[default]
    DeployLogUniform,
    DeployUniform,
}

impl fmt::Display for RankWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankWeighting::RankUniform => "rank-uniform",
            RankWeighting::DeployLogUniform => "deploy-log-uniform",
            RankWeighting::DeployUniform => "deploy-uniform",
        })
    }
}

impl FromStr for RankWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rank-uniform" | "rankuniform" => Ok(RankWeighting::RankUniform),
            "deploy-log-uniform" | "deployloguniform" => Ok(RankWeighting::DeployLogUniform),
            "deploy-uniform" | "deployuniform" => Ok(RankWeighting::DeployUniform),
            o => Err(Error::Parse(format!("unknown rank weighting `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSpace {
    #[default]
    TransformedScore,
    InverseTransformed,
}

impl fmt::Display for LossSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSpace::TransformedScore => "score",
            LossSpace::InverseTransformed => "inverse",
        })
    }
}

impl FromStr for LossSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "score" | "transformed" => Ok(LossSpace::TransformedScore),
            "inverse" | "logp" => Ok(LossSpace::InverseTransformed),
            o => Err(Error::Parse(format!("unknown loss space `{o}`"))),
        }
    }
}

/// A fitted tail line `log S = a * psi + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub a: f64,
    pub b: f64,
    pub k: usize,
    pub m: usize,
    pub scheme: PlottingScheme,
    pub transform: ScoreTransform,
    pub fit_depth_max: f64,
}

/// Ordinary least squares of `y` on `x`; returns `(slope, intercept)`.
/// Ties in `x` are allowed as long as `x` is not constant.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: x.len() });
    }
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - xm) * (xi - xm);
        sxy += (xi - xm) * (yi - ym);
    }
    if sxx == 0.0 || !sxx.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    let a = sxy / sxx;
    Ok((a, ym - a * xm))
}

pub fn plotting_positions(m: usize, k: usize, scheme: PlottingScheme) -> Result<Vec<f64>> {
    if k < 2 || k > m {
        return Err(Error::InvalidTopCount { k, m });
    }
    Ok((1..=k).map(|i| scheme.survival(i, m)).collect())
}

/// Fits the tail line to the top-k raw scores (descending) of a fit set of
/// size `m`. Exact ties after the transform are refused.
pub fn fit_tail(topk: &[f64], m: usize, scheme: PlottingScheme, transform: ScoreTransform) -> Result<TailFit> {
    let k = topk.len();
    if k < 2 || k > m {
        return Err(Error::InvalidTopCount { k, m });
    }
    let psi = topk.iter().map(|&x| transform.forward(x)).collect::<Result<Vec<_>>>()?;
    for i in 1..k {
        if psi[i] == psi[i - 1] {
            return Err(Error::TiedScores(i, i + 1));
        }
        if psi[i] > psi[i - 1] {
            return Err(Error::NotDescending(i + 1));
        }
    }
    fit_transformed(&psi, m, scheme, transform)
}

/// Fit on already-transformed top-k scores, tolerating ties.
pub fn fit_transformed(psi: &[f64], m: usize, scheme: PlottingScheme, transform: ScoreTransform) -> Result<TailFit> {
    let k = psi.len();
    if k < 2 || k > m {
        return Err(Error::InvalidTopCount { k, m });
    }
    if let Some(i) = psi.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("transformed score at rank {}", i + 1)));
    }
    let log_s: Vec<f64> = (1..=k).map(|i| scheme.survival(i, m).ln()).collect();
    let (a, b) = fit_line(psi, &log_s)?;
    Ok(TailFit { a, b, k, m, scheme, transform, fit_depth_max: -log_s[0] })
}

impl TailFit {
    /// Transformed-space prediction at log-survival depth `y`.
    pub fn predict_at_depth(&self, y: f64) -> f64 {
        -(y + self.b) / self.a
    }

    /// `Q(n) = -(log n + b) / a` in transformed space.
    pub fn predict_quantile(&self, n: f64) -> Result<f64> {
        if !(n > 1.0) {
            return Err(Error::InvalidParameter(format!("deployment size must exceed 1, got {n}")));
        }
        if !(self.a < 0.0) {
            return Err(Error::InvalidParameter(format!("slope must be negative, got {}", self.a)));
        }
        Ok(self.predict_at_depth(n.ln()))
    }

    /// Flat `key=value` record, one per line.
    pub fn to_record(&self) -> String {
        format!(
            "a={}\nb={}\nk={}\nm={}\nscheme={}\ntransform={}\nfit_depth_max={}\n",
            self.a, self.b, self.k, self.m, self.scheme, self.transform, self.fit_depth_max
        )
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("bad record line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| kv.get(k).ok_or_else(|| Error::Parse(format!("missing field `{k}`")));
        let num = |k: &str| -> Result<f64> { field(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
        Ok(TailFit {
            a: num("a")?,
            b: num("b")?,
            k: int("k")?,
            m: int("m")?,
            scheme: field("scheme")?.parse()?,
            transform: field("transform")?.parse()?,
            fit_depth_max: num("fit_depth_max")?,
        })
    }
}

/// Ranks of an `n`-sample deployment whose plotting depth lies strictly
/// beyond the deepest fit-side depth for a fit set of size `m`.
pub fn extrapolated_ranks(m: usize, n: usize, scheme: PlottingScheme) -> Result<Vec<usize>> {
    let limit = scheme.depth(1, m);
    let j: Vec<usize> = (1..=n).take_while(|&j| scheme.depth(j, n) > limit).collect();
    if j.is_empty() {
        return Err(Error::EmptyRankSet { m, n });
    }
    Ok(j)
}

pub fn rank_weights(ranks: &[usize], weighting: RankWeighting) -> Result<Vec<f64>> {
    if ranks.is_empty() {
        return Err(Error::InvalidParameter("empty rank set".into()));
    }
    let raw: Vec<f64> = ranks
        .iter()
        .map(|&j| {
            let j = j as f64;
            match weighting {
                RankWeighting::RankUniform => 1.0,
                RankWeighting::DeployLogUniform => ((j + 1.0) / j).ln(),
                RankWeighting::DeployUniform => 1.0 / (j * j),
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrors {
    /// `Q(y_j) - Y_(j)` per rank in `J`, in the chosen loss space.
    pub residuals: Vec<f64>,
    pub loss: f64,
}

/// Per-rank errors of `fit` against raw deploy scores (descending).
pub fn forecast_errors(
    fit: &TailFit,
    deploy: &[f64],
    ranks: &[usize],
    weights: &[f64],
    space: LossSpace,
) -> Result<ForecastErrors> {
    let n = deploy.len();
    if weights.len() != ranks.len() {
        return Err(Error::InvalidParameter("weights and ranks differ in length".into()));
    }
    if let Some(&j) = ranks.iter().find(|&&j| j == 0 || j > n) {
        return Err(Error::InvalidParameter(format!("rank {j} outside 1..={n}")));
    }
    let mut residuals = Vec::with_capacity(ranks.len());
    let mut loss = 0.0;
    for (&j, &w) in ranks.iter().zip(weights) {
        let pred = fit.predict_at_depth(fit.scheme.depth(j, n));
        let obs = fit.transform.forward(deploy[j - 1])?;
        let r = match space {
            LossSpace::TransformedScore => pred - obs,
            LossSpace::InverseTransformed => fit.transform.to_loss_space(pred) - fit.transform.to_loss_space(obs),
        };
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("residual at rank {j}")));
        }
        loss += w * r * r;
        residuals.push(r);
    }
    Ok(ForecastErrors { residuals, loss })
}

/// Sorts descending (stable; NaN is refused).
pub fn sort_descending(scores: &mut [f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|x| x.is_nan()) {
        return Err(Error::NonFinite(format!("score at line {}", i + 1)));
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    Ok(())
}

/// The `k` largest values, descending.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > scores.len() {
        return Err(Error::InvalidTopCount { k, m: scores.len() });
    }
    let mut v = scores.to_vec();
    if k < v.len() {
        if let Some(i) = v.iter().position(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("score at index {i}")));
        }
        v.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
        v.truncate(k);
    }
    sort_descending(&mut v)?;
    Ok(v)
}
