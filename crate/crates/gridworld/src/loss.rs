//! Differentiable forecastability loss over top-k fit scores and
//! extrapolated deploy ranks, with improving-only gradient masks.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use tailcast::forecaster::{
    extrapolated_ranks, fit_transformed, rank_weights, LossSpace, PlottingScheme, RankWeighting, ScoreTransform,
};
use tailcast_autodiff::{Tensor, Var};

use crate::error::{GridError, Result};

/// Which sides receive improving-only masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IogScope {
    None,
    FitOnly,
    DeployOnly,
    #[default]
    Both,
}

impl IogScope {
    fn fit(self) -> bool {
        matches!(self, IogScope::FitOnly | IogScope::Both)
    }

    fn deploy(self) -> bool {
        matches!(self, IogScope::DeployOnly | IogScope::Both)
    }
}

impl fmt::Display for IogScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IogScope::None => "none",
            IogScope::FitOnly => "fit",
            IogScope::DeployOnly => "deploy",
            IogScope::Both => "both",
        })
    }
}

impl FromStr for IogScope {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IogScope::None),
            "fit" => Ok(IogScope::FitOnly),
            "deploy" => Ok(IogScope::DeployOnly),
            "both" => Ok(IogScope::Both),
            o => Err(GridError::Parse(format!("unknown iog scope `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub k: usize,
    pub scheme: PlottingScheme,
    pub transform: ScoreTransform,
    pub weighting: RankWeighting,
    pub space: LossSpace,
    pub iog: IogScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: 10,
            scheme: PlottingScheme::Weibull,
            transform: ScoreTransform::Identity,
            weighting: RankWeighting::DeployLogUniform,
            space: LossSpace::TransformedScore,
            iog: IogScope::Both,
        }
    }
}

/// Result of [`forecast_loss`].
#[derive(Debug, Clone)]
pub struct ForecastLoss<'g> {
    pub loss: Var<'g>,
    /// Loss-space residuals `Q(y_j) - Y_(j)` per extrapolated rank.
    pub residuals: Vec<f64>,
    /// Predicted and observed transformed scores per extrapolated rank.
    pub predicted: Vec<f64>,
    pub observed: Vec<f64>,
    pub fit_active: Vec<bool>,
    pub deploy_active: Vec<bool>,
    pub a: f64,
    pub b: f64,
}

/// Log plotting positions of the top `count` ranks of a sample of `size`.
pub fn log_positions(scheme: PlottingScheme, count: usize, size: usize) -> Vec<f64> {
    (1..=count).map(|i| scheme.survival(i, size).ln()).collect()
}

/// Deploy-side gradient mask: a rank is active when the line under-predicts it.
pub fn deploy_side_mask(residuals: &[f64]) -> Vec<bool> {
    residuals.iter().map(|&r| r < 0.0).collect()
}

/// Closed-form `dL/dpsi_i` for `L = sum_j w_j r_j^2`, where the OLS line
/// regresses fit log positions `y` on `psi`, `r_j = g(Q_j) - g(Y_j)` and
/// `Q_j` is the line's inverse at deploy log position `y_dep[j]`.
/// `g_prime[j]` is `g'(Q_j)`.
pub fn fit_side_derivative(
    psi: &[f64],
    y: &[f64],
    y_dep: &[f64],
    residuals: &[f64],
    weights: &[f64],
    g_prime: &[f64],
) -> Result<Vec<f64>> {
    let k = psi.len() as f64;
    let pm = psi.iter().sum::<f64>() / k;
    let ym = y.iter().sum::<f64>() / k;
    let spp: f64 = psi.iter().map(|p| (p - pm) * (p - pm)).sum();
    let spy: f64 = psi.iter().zip(y).map(|(p, q)| (p - pm) * (q - ym)).sum();
    if spp == 0.0 || spy == 0.0 {
        return Err(GridError::Forecast(tailcast::Error::ZeroDenominator));
    }
    let a = spy / spp;
    let rt: Vec<f64> = residuals.iter().zip(weights).zip(g_prime).map(|((r, w), g)| w * r * g).collect();
    let c1 = -rt.iter().zip(y_dep).map(|(r, yj)| r * (yj - ym)).sum::<f64>() / (a * a * spp);
    let c2 = 2.0 / k * rt.iter().sum::<f64>();
    Ok(psi.iter().zip(y).map(|(p, yi)| 2.0 * c1 * ((yi - ym) - 2.0 * a * (p - pm)) + c2).collect())
}

/// Fit-side gradient mask: a fit point is active when descending its
/// gradient lowers its score.
pub fn fit_side_mask(derivative: &[f64]) -> Vec<bool> {
    derivative.iter().map(|&d| d > 0.0).collect()
}

fn vector(values: Vec<f64>) -> Tensor {
    let n = values.len();
    ArrayD::from_shape_vec(IxDyn(&[n]), values).expect("sized")
}

fn mask_tensor(active: &[bool]) -> Tensor {
    vector(active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())
}

fn transform_node<'g>(x: Var<'g>, t: ScoreTransform) -> Result<Var<'g>> {
    Ok(match t {
        ScoreTransform::Identity => x,
        ScoreTransform::GumbelProb => x.log()?.neg().log()?.neg(),
    })
}

fn loss_space_node<'g>(psi: Var<'g>, t: ScoreTransform, space: LossSpace) -> Result<Var<'g>> {
    Ok(match (space, t) {
        (LossSpace::InverseTransformed, ScoreTransform::GumbelProb) => psi.neg().exp()?.neg(),
        _ => psi,
    })
}

/// Forecastability loss of the line fitted to `fit_top` (the `k` largest
/// raw scores of a fit set of size `m`, descending) against `deploy_top`
/// (the raw scores at the extrapolated ranks of a deploy set of size `n`,
/// descending). Masks are straight-through: the forward value never
/// depends on them.
pub fn forecast_loss<'g>(
    fit_top: Var<'g>,
    m: usize,
    deploy_top: Var<'g>,
    n: usize,
    cfg: &LossConfig,
) -> Result<ForecastLoss<'g>> {
    let g = fit_top.graph();
    let ranks = extrapolated_ranks(m, n, cfg.scheme)?;
    if fit_top.shape() != [cfg.k] || deploy_top.shape() != [ranks.len()] {
        return Err(GridError::ShapeMismatch(format!(
            "fit {:?} and deploy {:?}, expected [{}] and [{}]",
            fit_top.shape(),
            deploy_top.shape(),
            cfg.k,
            ranks.len()
        )));
    }
    let weights = rank_weights(&ranks, cfg.weighting)?;
    let tf = cfg.transform;
    let psi: Vec<f64> = fit_top.value().iter().map(|&x| tf.forward(x)).collect::<tailcast::Result<_>>()?;
    let psi_dep: Vec<f64> = deploy_top.value().iter().map(|&x| tf.forward(x)).collect::<tailcast::Result<_>>()?;
    let line = fit_transformed(&psi, m, cfg.scheme, tf)?;
    let y = log_positions(cfg.scheme, cfg.k, m);
    let y_dep = log_positions(cfg.scheme, ranks.len(), n);

    let to_space = |v: f64| match cfg.space {
        LossSpace::TransformedScore => v,
        LossSpace::InverseTransformed => tf.to_loss_space(v),
    };
    let predicted: Vec<f64> = y_dep.iter().map(|&yj| (yj - line.b) / line.a).collect();
    let residuals: Vec<f64> = predicted.iter().zip(&psi_dep).map(|(&q, &o)| to_space(q) - to_space(o)).collect();
    let g_prime: Vec<f64> = predicted
        .iter()
        .map(|&q| match cfg.space {
            LossSpace::TransformedScore => 1.0,
            LossSpace::InverseTransformed => tf.to_loss_space_deriv(q),
        })
        .collect();

    let deploy_active = if cfg.iog.deploy() { deploy_side_mask(&residuals) } else { vec![true; ranks.len()] };
    let fit_active = if cfg.iog.fit() {
        fit_side_mask(&fit_side_derivative(&psi, &y, &y_dep, &residuals, &weights, &g_prime)?)
    } else {
        vec![true; cfg.k]
    };

    let fit_in = if cfg.iog.fit() { fit_top.mask_grad(mask_tensor(&fit_active))? } else { fit_top };
    let dep_in = if cfg.iog.deploy() { deploy_top.mask_grad(mask_tensor(&deploy_active))? } else { deploy_top };

    let psi_v = transform_node(fit_in, tf)?;
    let psi_dep_v = transform_node(dep_in, tf)?;
    let ym = y.iter().sum::<f64>() / cfg.k as f64;
    let yc = g.constant(vector(y.iter().map(|v| v - ym).collect()));
    let pm = psi_v.mean();
    let pc = psi_v.sub(pm)?;
    let spp = pc.square().sum();
    let spy = pc.mul(yc)?.sum();
    let offsets = g.constant(vector(y_dep.iter().map(|v| v - ym).collect()));
    let q = offsets.mul(spp.div(spy)?)?.add(pm)?;
    let r = loss_space_node(q, tf, cfg.space)?.sub(loss_space_node(psi_dep_v, tf, cfg.space)?)?;
    let loss = r.square().mul(g.constant(vector(weights)))?.sum();

    Ok(ForecastLoss {
        loss,
        residuals,
        predicted,
        observed: psi_dep,
        fit_active,
        deploy_active,
        a: line.a,
        b: line.b,
    })
}
