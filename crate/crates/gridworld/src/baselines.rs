//! Post-hoc calibration, direct regret fine-tuning, and the condition
//! comparison grid.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayD;
use tailcast::par::par_map;
use tailcast::rng::{derive_seed, stream};
use tailcast_autodiff::{AdamW, Graph, ParamSet, Tensor};

use crate::env::{regret, GridTask};
use crate::error::{GridError, Result};
use crate::finetune::{
    add_into, evaluate_pairs, regularizer, sample_pools, MetaRunConfig, PairEval, RunTrace, StepDiagnostics,
    StepRecord, TraceLine, TrainingData,
};
use crate::loss::LossConfig;
use crate::policy::{bind, policy_forward, score_returns};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCalibration {
    pub alpha: f64,
    pub beta: f64,
}

impl AffineCalibration {
    pub fn apply(&self, predicted: f64) -> f64 {
        self.alpha * predicted + self.beta
    }
}

/// Least-squares `actual ~ alpha * predicted + beta`.
pub fn fit_affine(predicted: &[f64], actual: &[f64]) -> Result<AffineCalibration> {
    if predicted.len() != actual.len() || predicted.len() < 2 {
        return Err(GridError::InvalidParameter(format!(
            "affine calibration needs >= 2 matched pairs, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let (alpha, beta) = tailcast::forecaster::fit_line(predicted, actual)?;
    Ok(AffineCalibration { alpha, beta })
}

/// Offset `mean(actual - predicted)`.
pub fn fit_shift(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(GridError::InvalidParameter("shift calibration needs >= 1 matched pair".into()));
    }
    Ok(actual.iter().zip(predicted).map(|(a, p)| a - p).sum::<f64>() / predicted.len() as f64)
}

/// Minimises mean regret over random union batches of the training pools,
/// with the same optimizer and regularizer as [`crate::finetune::run_finetune`].
/// `batch` tasks are drawn from each sampled pool per step. No forecast is
/// computed.
pub fn sft_run(
    data: &TrainingData<'_>,
    params: &ParamSet,
    cfg: &MetaRunConfig,
    batch: usize,
    seed: u64,
    start: usize,
) -> Result<(ParamSet, RunTrace)> {
    if data.train.is_empty() || batch == 0 {
        return Err(GridError::InvalidParameter("need training pools and a positive batch".into()));
    }
    let mut params = params.clone();
    let mut trace = RunTrace::default();
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay).with_clip(cfg.clip);
    let (pool_seed, batch_seed, reg_seed) =
        (derive_seed(seed, "pools"), derive_seed(seed, "sft-batches"), derive_seed(seed, "regularizer"));
    for step in start..start + cfg.steps {
        let chosen = sample_pools(data.train.len(), cfg.pools_per_step, pool_seed, step);
        let outcomes = par_map(data.exec, &chosen, |_, &p| -> Result<(f64, Vec<Tensor>, usize)> {
            let pool = data.train[p].union();
            let mut rng = stream(batch_seed, ((step as u64) << 20) | p as u64);
            let pick = rand::seq::index::sample(&mut rng, pool.len(), batch.min(pool.len()));
            let tasks: Vec<&GridTask> = pick.into_iter().map(|i| &data.tasks[pool[i]]).collect();
            let g = Graph::new();
            let vars = bind(&g, &params);
            let logits = policy_forward(&data.net, &vars, &tasks)?;
            let loss = regret(&tasks, &data.env, logits)?.mean();
            let value = loss.item()?;
            let grads = g.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect(), tasks.len()))
        });
        let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        let share = 1.0 / chosen.len() as f64;
        let mut train_loss = 0.0;
        let mut diag = StepDiagnostics::default();
        for outcome in outcomes {
            let (loss, g, evals) = outcome?;
            add_into(&mut grads, &g, share);
            train_loss += share * loss;
            diag.grad_evals += evals;
        }
        let (reg, reg_grads) = regularizer(data, &params, cfg.lambda, cfg.reg_batch, reg_seed, step)?;
        add_into(&mut grads, &reg_grads, 1.0);
        if !(train_loss + reg).is_finite() {
            return Err(GridError::Divergence { step });
        }
        let info = opt.step(&mut params.tensors, &grads).map_err(|_| GridError::Divergence { step })?;
        trace.lines.push(TraceLine::Step(StepRecord {
            step,
            train_loss,
            held_out_loss: None,
            regularizer: reg,
            grad_norm: info.grad_norm,
            diagnostics: diag,
        }));
    }
    Ok((params, trace))
}

/// Per-pool batch that matches the forecastability run's score evaluations:
/// the cache plus the amortised cache refresh.
pub fn matched_sft_batch(cfg: &MetaRunConfig) -> usize {
    cfg.c + (cfg.m + cfg.n).div_ceil(cfg.rho.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Pretrained,
    Cal,
    Sft,
    SftCal,
    Ours,
    OursCal,
}

impl Condition {
    pub const ALL: [Condition; 6] =
        [Condition::Pretrained, Condition::Cal, Condition::Sft, Condition::SftCal, Condition::Ours, Condition::OursCal];

    pub fn calibrated(self) -> bool {
        matches!(self, Condition::Cal | Condition::SftCal | Condition::OursCal)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Pretrained => "pretrained",
            Condition::Cal => "cal",
            Condition::Sft => "sft",
            Condition::SftCal => "sft+cal",
            Condition::Ours => "ours",
            Condition::OursCal => "ours+cal",
        })
    }
}

impl FromStr for Condition {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| GridError::Parse(format!("unknown condition `{s}`")))
    }
}

/// Gradient-free evaluation of one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsEval {
    /// Mean return on the pretraining tasks.
    pub capability: f64,
    pub held_out: Vec<PairEval>,
    /// Training pairs, used only to fit calibrations.
    pub train: Vec<PairEval>,
}

pub fn evaluate_params(data: &TrainingData<'_>, params: &ParamSet, loss: &LossConfig) -> Result<ParamsEval> {
    let held_in: Vec<&GridTask> = data.held_in.iter().map(|&i| &data.tasks[i]).collect();
    let returns = score_returns(&data.net, params, &data.env, &held_in)?;
    Ok(ParamsEval {
        capability: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        held_out: evaluate_pairs(&data.net, &data.env, data.tasks, data.held_out, params, loss)?,
        train: evaluate_pairs(&data.net, &data.env, data.tasks, data.train, params, loss)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionMetrics {
    pub capability: f64,
    /// Worst held-out deploy regret.
    pub safety: f64,
    /// Mean over held-out pairs of the squared worst-rank forecast error.
    pub forecast: f64,
}

/// Metrics of a condition from its parameters' evaluation. Calibrated
/// conditions fit an affine map on the training pairs' worst-rank
/// (predicted, actual) and apply it unchanged to the held-out pairs.
pub fn condition_metrics(condition: Condition, eval: &ParamsEval) -> Result<ConditionMetrics> {
    let forecast = if condition.calibrated() {
        let pred: Vec<f64> = eval.train.iter().map(|e| e.predicted_worst).collect();
        let act: Vec<f64> = eval.train.iter().map(|e| e.actual_worst).collect();
        let cal = fit_affine(&pred, &act)?;
        mean(eval.held_out.iter().map(|e| (cal.apply(e.predicted_worst) - e.actual_worst).powi(2)))
    } else {
        mean(eval.held_out.iter().map(|e| e.worst_sq_error))
    };
    Ok(ConditionMetrics {
        capability: eval.capability,
        safety: eval.held_out.iter().map(|e| e.max_regret).fold(f64::NEG_INFINITY, f64::max),
        forecast,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Parameter sets available to [`evaluate_condition`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub pretrained: Option<&'a ParamSet>,
    pub sft: Option<&'a ParamSet>,
    pub ours: Option<&'a ParamSet>,
}

impl<'a> Artifacts<'a> {
    pub fn params_for(&self, condition: Condition) -> Result<&'a ParamSet> {
        let (p, name) = match condition {
            Condition::Pretrained | Condition::Cal => (self.pretrained, "pretrained parameters"),
            Condition::Sft | Condition::SftCal => (self.sft, "SFT parameters"),
            Condition::Ours | Condition::OursCal => (self.ours, "fine-tuned parameters"),
        };
        p.ok_or_else(|| GridError::MissingArtifact(name.into()))
    }
}

pub fn evaluate_condition(
    condition: Condition,
    artifacts: &Artifacts<'_>,
    data: &TrainingData<'_>,
    loss: &LossConfig,
) -> Result<ConditionMetrics> {
    let eval = evaluate_params(data, artifacts.params_for(condition)?, loss)?;
    condition_metrics(condition, &eval)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub condition: Condition,
    pub metrics: ConditionMetrics,
    pub fold_capability: f64,
    pub fold_safety: f64,
    pub fold_forecast: f64,
}

/// Folds against the seed's pretrained metrics; above 1 is better.
pub fn comparison_row(seed: u64, condition: Condition, m: ConditionMetrics, base: ConditionMetrics) -> ComparisonRow {
    ComparisonRow {
        seed,
        condition,
        metrics: m,
        fold_capability: m.capability / base.capability,
        fold_safety: base.safety / m.safety,
        fold_forecast: base.forecast / m.forecast,
    }
}

pub const COMPARISON_HEADER: &str =
    "seed,condition,capability,safety,forecast_worst_sq_error,fold_capability,fold_safety,fold_forecast";

pub fn comparison_line(r: &ComparisonRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.seed,
        r.condition,
        r.metrics.capability,
        r.metrics.safety,
        r.metrics.forecast,
        r.fold_capability,
        r.fold_safety,
        r.fold_forecast
    )
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{COMPARISON_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", comparison_line(r))?;
    }
    f.flush()?;
    Ok(())
}
