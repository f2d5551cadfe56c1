//! Meta multi-task forecastability fine-tuning: per-step partitions, a
//! union top-C cache with lazy fit fallback, improving-only masks and a
//! return regularizer.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use tailcast::forecaster::{extrapolated_ranks, fit_transformed, forecast_errors, rank_weights, top_k};
use tailcast::par::{par_map, run_trials_multi};
use tailcast::rng::{derive_seed, stream};
use tailcast::Execution;
use tailcast_autodiff::{AdamW, Graph, ParamSet, Tensor};

use crate::bank::PoolPair;
use crate::env::{regret, EnvParams, GridTask};
use crate::error::{GridError, Result};
use crate::loss::{forecast_loss, LossConfig};
use crate::policy::{bind, mean_return, policy_forward, score_regrets, NetConfig};

/// Uniform random split of positions `0..size` into `m` fit and `size - m`
/// deploy positions, both ascending.
pub fn partition<R: rand::Rng + ?Sized>(size: usize, m: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if m == 0 || m >= size {
        return Err(GridError::InvalidParameter(format!("cannot split {size} tasks into {m} fit and the rest deploy")));
    }
    let mut in_fit = vec![false; size];
    for i in rand::seq::index::sample(rng, size, m) {
        in_fit[i] = true;
    }
    let fit = (0..size).filter(|&i| in_fit[i]).collect();
    let deploy = (0..size).filter(|&i| !in_fit[i]).collect();
    Ok((fit, deploy))
}

/// Positions of the `count` largest scores, descending, lower index first
/// among ties.
pub fn top_positions(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionCache {
    pub cached_indices: Vec<usize>,
    pub last_refresh_step: Option<usize>,
    pub c: usize,
    pub rho: usize,
}

impl PartitionCache {
    pub fn new(c: usize, rho: usize) -> Self {
        PartitionCache { cached_indices: Vec::new(), last_refresh_step: None, c, rho }
    }

    pub fn is_stale(&self, step: usize) -> bool {
        match self.last_refresh_step {
            None => true,
            Some(s) => step >= s + self.rho.max(1),
        }
    }
}

/// Top-`c` cache over pool positions given gradient-free scores.
pub fn refresh_cache(scores: &[f64], c: usize, rho: usize, step: usize) -> Result<PartitionCache> {
    if c == 0 {
        return Err(GridError::InvalidParameter("cache size must be positive".into()));
    }
    Ok(PartitionCache { cached_indices: top_positions(scores, c), last_refresh_step: Some(step), c, rho })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub miss_probability: f64,
    pub extra_conditional: f64,
    pub extra_unconditional: f64,
}

/// Exact hypergeometric coverage of a top-`c` union cache: with
/// `X ~ Hypergeometric(m + n, c, m)` the number of cached fit points,
/// returns `P[X < k]`, `E[m - X | X < k]` and their product.
pub fn coverage_analysis(c: usize, m: usize, n: usize, k: usize) -> Result<Coverage> {
    let total = m + n;
    if c > total {
        return Err(GridError::InvalidParameter(format!("cache {c} larger than pool {total}")));
    }
    let (c64, m64, t64) = (c as u64, m as u64, total as u64);
    let ln_all = ln_binomial(t64, m64);
    let lo = (m + c).saturating_sub(total);
    let hi = m.min(c);
    let mut miss = 0.0;
    let mut extra = 0.0;
    for x in lo..=hi.min(k.saturating_sub(1)) {
        if k == 0 {
            break;
        }
        let x64 = x as u64;
        let p = (ln_binomial(c64, x64) + ln_binomial(t64 - c64, m64 - x64) - ln_all).exp();
        miss += p;
        extra += p * (m - x) as f64;
    }
    let conditional = if miss > 0.0 { extra / miss } else { 0.0 };
    Ok(Coverage { miss_probability: miss, extra_conditional: conditional, extra_unconditional: extra })
}

/// Monte Carlo check of [`coverage_analysis`] by drawing random partitions.
/// Also returns the standard error of the miss probability.
pub fn simulate_coverage(
    c: usize,
    m: usize,
    n: usize,
    k: usize,
    draws: u64,
    exec: Execution,
    seed: u64,
) -> Result<(Coverage, f64)> {
    let total = m + n;
    if c > total || m == 0 {
        return Err(GridError::InvalidParameter(format!("cache {c}, fit {m}, pool {total}")));
    }
    let [miss, extra] = run_trials_multi::<2, _>(exec, seed, draws, |rng| {
        let x = rand::seq::index::sample(rng, total, m).into_iter().filter(|&i| i < c).count();
        Ok(if x < k { [1.0, (m - x) as f64] } else { [0.0, 0.0] })
    })?;
    let p = miss.mean();
    let cov = Coverage {
        miss_probability: p,
        extra_conditional: if p > 0.0 { extra.mean() / p } else { 0.0 },
        extra_unconditional: extra.mean(),
    };
    Ok((cov, miss.se()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaRunConfig {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    pub rho: usize,
    pub n_perm: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss: LossConfig,
    pub pools_per_step: usize,
    pub eval_every: usize,
    pub clip: f64,
    pub weight_decay: f64,
    pub reg_batch: usize,
}

impl Default for MetaRunConfig {
    fn default() -> Self {
        MetaRunConfig {
            m: 96,
            n: 1920,
            c: 296,
            rho: 5,
            n_perm: 1,
            steps: 300,
            lr: 1e-4,
            lambda: 1.5,
            loss: LossConfig::default(),
            pools_per_step: 10,
            eval_every: 10,
            clip: 1.0,
            weight_decay: 0.0,
            reg_batch: 16,
        }
    }
}

impl MetaRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < self.loss.k || self.m < self.loss.k || self.loss.k < 2 {
            return Err(GridError::InvalidParameter(format!(
                "need 2 <= k <= min(C, M); got k={}, C={}, M={}",
                self.loss.k, self.c, self.m
            )));
        }
        if self.pools_per_step == 0 || self.rho == 0 {
            return Err(GridError::InvalidParameter("pools_per_step and rho must be positive".into()));
        }
        extrapolated_ranks(self.m, self.n, self.loss.scheme)?;
        Ok(())
    }
}

/// Everything a training run reads besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub net: NetConfig,
    pub env: EnvParams,
    pub tasks: &'a [GridTask],
    pub train: &'a [PoolPair],
    pub held_out: &'a [PoolPair],
    /// Indices of the tasks behind the return regularizer.
    pub held_in: &'a [usize],
    pub exec: Execution,
}

impl TrainingData<'_> {
    fn refs(&self, idx: &[usize]) -> Vec<&GridTask> {
        idx.iter().map(|&i| &self.tasks[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub refreshed: bool,
    pub cache_miss: bool,
    pub extra_evals: usize,
    pub grad_evals: usize,
    pub nograd_evals: usize,
    pub fit_masked: usize,
    pub deploy_masked: usize,
}

impl StepDiagnostics {
    fn absorb(&mut self, o: &StepDiagnostics) {
        self.refreshed |= o.refreshed;
        self.cache_miss |= o.cache_miss;
        self.extra_evals += o.extra_evals;
        self.grad_evals += o.grad_evals;
        self.nograd_evals += o.nograd_evals;
        self.fit_masked += o.fit_masked;
        self.deploy_masked += o.deploy_masked;
    }
}

/// One pool's contribution to a step.
#[derive(Debug, Clone)]
pub struct PoolStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub cache: PartitionCache,
    pub diagnostics: StepDiagnostics,
}

/// Forecastability loss and gradient for one pool. `n_perm = 0` keeps the
/// pair's own partition and caches the deploy side only.
pub fn meta_step<R: rand::Rng + ?Sized>(
    data: &TrainingData<'_>,
    pair: &PoolPair,
    params: &ParamSet,
    cache: &PartitionCache,
    cfg: &MetaRunConfig,
    rng: &mut R,
    step: usize,
) -> Result<PoolStep> {
    let (m, k) = (cfg.m, cfg.loss.k);
    if pair.fit.len() != m || pair.deploy.len() != cfg.n {
        return Err(GridError::InvalidParameter(format!(
            "pool pair has {}+{} tasks, config expects {}+{}",
            pair.fit.len(),
            pair.deploy.len(),
            m,
            cfg.n
        )));
    }
    let pool = pair.union();
    let size = pool.len();
    let tasks = data.refs(&pool);
    let fixed = cfg.n_perm == 0;
    let mut diag = StepDiagnostics::default();

    let mut cache = cache.clone();
    if cache.is_stale(step) {
        let candidates: Vec<usize> = if fixed { (m..size).collect() } else { (0..size).collect() };
        let sub: Vec<&GridTask> = candidates.iter().map(|&p| tasks[p]).collect();
        let scores = score_regrets(&data.net, params, &data.env, &sub)?;
        diag.nograd_evals += sub.len();
        diag.refreshed = true;
        let mut fresh = refresh_cache(&scores, cfg.c, cfg.rho, step)?;
        fresh.cached_indices = fresh.cached_indices.iter().map(|&i| candidates[i]).collect();
        cache = fresh;
    }

    let partitions: Vec<(Vec<usize>, Vec<usize>)> = if fixed {
        vec![((0..m).collect(), (m..size).collect())]
    } else {
        (0..cfg.n_perm).map(|_| partition(size, m, rng)).collect::<Result<_>>()?
    };
    let ranks = extrapolated_ranks(m, cfg.n, cfg.loss.scheme)?.len();

    let mut cached = vec![false; size];
    for &p in &cache.cached_indices {
        cached[p] = true;
    }
    let mut scored = cached.clone();
    for (fit, deploy) in &partitions {
        if fit.iter().filter(|&&p| cached[p]).count() < k {
            diag.cache_miss = true;
            for &p in fit {
                scored[p] = true;
            }
        }
        if deploy.iter().filter(|&&p| scored[p]).count() < ranks {
            for &p in deploy {
                scored[p] = true;
            }
        }
    }
    let evaluated: Vec<usize> = (0..size).filter(|&p| scored[p]).collect();
    diag.extra_evals = evaluated.len() - cache.cached_indices.len();
    diag.grad_evals = evaluated.len();
    let mut slot = vec![usize::MAX; size];
    for (i, &p) in evaluated.iter().enumerate() {
        slot[p] = i;
    }

    let g = Graph::new();
    let vars = bind(&g, params);
    let eval_tasks: Vec<&GridTask> = evaluated.iter().map(|&p| tasks[p]).collect();
    let logits = policy_forward(&data.net, &vars, &eval_tasks)?;
    let scores = regret(&eval_tasks, &data.env, logits)?;
    let values = scores.value();

    let pick = |side: &[usize], count: usize| -> Vec<usize> {
        let avail: Vec<usize> = side.iter().copied().filter(|&p| scored[p]).collect();
        let v: Vec<f64> = avail.iter().map(|&p| values[slot[p]]).collect();
        top_positions(&v, count).into_iter().map(|i| slot[avail[i]]).collect()
    };
    let mut total = None;
    for (fit, deploy) in &partitions {
        let fit_top = scores.gather(Rc::new(pick(fit, k)), &[k])?;
        let dep_top = scores.gather(Rc::new(pick(deploy, ranks)), &[ranks])?;
        let fl = forecast_loss(fit_top, m, dep_top, cfg.n, &cfg.loss)?;
        diag.fit_masked += fl.fit_active.iter().filter(|&&a| !a).count();
        diag.deploy_masked += fl.deploy_active.iter().filter(|&&a| !a).count();
        total = Some(match total {
            None => fl.loss,
            Some(t) => fl.loss.add(t)?,
        });
    }
    let loss = total.expect("at least one partition").scale(1.0 / partitions.len() as f64);
    let value = loss.item()?;
    let grads = g.backward(loss)?;
    Ok(PoolStep { loss: value, grads: vars.iter().map(|&v| grads.wrt(v)).collect(), cache, diagnostics: diag })
}

/// Per-rank forecast of one evaluated pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: usize,
    pub depth: f64,
    pub predicted: f64,
    pub actual: f64,
    pub residual: f64,
}

/// Full-rescoring evaluation of one (fit, deploy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub pair: usize,
    pub predicted_worst: f64,
    pub actual_worst: f64,
    pub worst_sq_error: f64,
    pub weighted_loss: f64,
    pub max_regret: f64,
    pub mean_regret: f64,
    pub ranks: Vec<RankRecord>,
}

/// Scores every task of each pair without gradients and forecasts the
/// deploy tail from the fit side's top-k.
pub fn evaluate_pairs(
    net: &NetConfig,
    env: &EnvParams,
    tasks: &[GridTask],
    pairs: &[PoolPair],
    params: &ParamSet,
    loss: &LossConfig,
) -> Result<Vec<PairEval>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs.iter().enumerate() {
        let refs = |idx: &[usize]| -> Vec<&GridTask> { idx.iter().map(|&i| &tasks[i]).collect() };
        let fit_scores = score_regrets(net, params, env, &refs(&pair.fit))?;
        let mut deploy = score_regrets(net, params, env, &refs(&pair.deploy))?;
        let (m, n) = (fit_scores.len(), deploy.len());
        let psi = top_k(&fit_scores, loss.k)?
            .into_iter()
            .map(|x| loss.transform.forward(x))
            .collect::<tailcast::Result<Vec<_>>>()?;
        let line = fit_transformed(&psi, m, loss.scheme, loss.transform)?;
        let ranks = extrapolated_ranks(m, n, loss.scheme)?;
        let weights = rank_weights(&ranks, loss.weighting)?;
        tailcast::forecaster::sort_descending(&mut deploy)?;
        let errs = forecast_errors(&line, &deploy, &ranks, &weights, loss.space)?;
        let records: Vec<RankRecord> = ranks
            .iter()
            .zip(&errs.residuals)
            .map(|(&j, &r)| {
                let depth = loss.scheme.depth(j, n);
                RankRecord {
                    rank: j,
                    depth,
                    predicted: line.predict_at_depth(depth),
                    actual: loss.transform.forward(deploy[j - 1]).unwrap_or(f64::NAN),
                    residual: r,
                }
            })
            .collect();
        out.push(PairEval {
            pair: id,
            predicted_worst: records[0].predicted,
            actual_worst: records[0].actual,
            worst_sq_error: errs.residuals[0] * errs.residuals[0],
            weighted_loss: errs.loss,
            max_regret: deploy[0],
            mean_regret: deploy.iter().sum::<f64>() / n as f64,
            ranks: records,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub held_out_loss: Option<f64>,
    pub regularizer: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub step: usize,
    pub pair: usize,
    #[serde(flatten)]
    pub rank: RankRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceLine {
    Step(StepRecord),
    Forecast(ForecastRecord),
}

/// Append-only record of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub lines: Vec<TraceLine>,
}

impl RunTrace {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.lines.iter().filter_map(|l| match l {
            TraceLine::Step(s) => Some(s),
            TraceLine::Forecast(_) => None,
        })
    }

    pub fn forecasts(&self) -> impl Iterator<Item = &ForecastRecord> {
        self.lines.iter().filter_map(|l| match l {
            TraceLine::Forecast(f) => Some(f),
            TraceLine::Step(_) => None,
        })
    }

    /// Step index the next record should carry.
    pub fn next_step(&self) -> usize {
        self.steps().last().map_or(0, |s| s.step + 1)
    }

    pub fn push_evals(&mut self, step: usize, evals: &[PairEval]) {
        for e in evals {
            for r in &e.ranks {
                self.lines.push(TraceLine::Forecast(ForecastRecord { step, pair: e.pair, rank: *r }));
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&serde_json::to_string(l).expect("plain data serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| GridError::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(RunTrace { lines })
    }
}

pub(crate) fn sample_pools(train: usize, per_step: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(&mut stream(seed, step as u64), train, per_step.min(train)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// `-lambda * mean return` on a random batch of held-in tasks, with its
/// gradient.
pub(crate) fn regularizer(
    data: &TrainingData<'_>,
    params: &ParamSet,
    lambda: f64,
    batch: usize,
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<Tensor>)> {
    if lambda == 0.0 || data.held_in.is_empty() {
        return Ok((0.0, params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect()));
    }
    let mut rng = stream(seed, step as u64);
    let pick = rand::seq::index::sample(&mut rng, data.held_in.len(), batch.min(data.held_in.len()));
    let idx: Vec<usize> = pick.into_iter().map(|i| data.held_in[i]).collect();
    let g = Graph::new();
    let vars = bind(&g, params);
    let reg = mean_return(&data.net, &vars, &data.env, &data.refs(&idx))?.scale(-lambda);
    let value = reg.item()?;
    let grads = g.backward(reg)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

pub(crate) fn add_into(acc: &mut [Tensor], grads: &[Tensor], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.scaled_add(scale, g);
    }
}

/// Runs `cfg.steps` outer steps starting at step `start`. Each step
/// averages [`meta_step`] gradients over the sampled pools (in pool order),
/// adds the regularizer gradient once, and takes one AdamW step. Held-out
/// pairs are evaluated every `eval_every` steps and after the last step;
/// they never contribute gradients.
pub fn run_finetune(
    data: &TrainingData<'_>,
    params: &ParamSet,
    cfg: &MetaRunConfig,
    seed: u64,
    start: usize,
) -> Result<(ParamSet, RunTrace)> {
    cfg.validate()?;
    if data.train.is_empty() || data.held_out.is_empty() {
        return Err(GridError::InvalidParameter("need at least one training and one held-out pool".into()));
    }
    let mut params = params.clone();
    let mut trace = RunTrace::default();
    let mut caches = vec![PartitionCache::new(cfg.c, cfg.rho); data.train.len()];
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay).with_clip(cfg.clip);
    let (pool_seed, part_seed, reg_seed) =
        (derive_seed(seed, "pools"), derive_seed(seed, "partitions"), derive_seed(seed, "regularizer"));
    let evaluate = |params: &ParamSet| evaluate_pairs(&data.net, &data.env, data.tasks, data.held_out, params, &cfg.loss);

    for step in start..start + cfg.steps {
        let mut held_out_loss = None;
        if cfg.eval_every > 0 && (step - start) % cfg.eval_every == 0 {
            let evals = evaluate(&params)?;
            held_out_loss = Some(evals.iter().map(|e| e.weighted_loss).sum::<f64>() / evals.len() as f64);
            trace.push_evals(step, &evals);
        }
        let chosen = sample_pools(data.train.len(), cfg.pools_per_step, pool_seed, step);
        let outcomes = par_map(data.exec, &chosen, |_, &p| {
            let mut rng = stream(part_seed, ((step as u64) << 20) | p as u64);
            meta_step(data, &data.train[p], &params, &caches[p], cfg, &mut rng, step)
        });
        let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        let mut diag = StepDiagnostics::default();
        let mut train_loss = 0.0;
        let share = 1.0 / chosen.len() as f64;
        for (&p, outcome) in chosen.iter().zip(outcomes) {
            let outcome = outcome?;
            add_into(&mut grads, &outcome.grads, share);
            train_loss += share * outcome.loss;
            diag.absorb(&outcome.diagnostics);
            caches[p] = outcome.cache;
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
            held_out_loss,
            regularizer: reg,
            grad_norm: info.grad_norm,
            diagnostics: diag,
        }));
    }
    let end = start + cfg.steps;
    let evals = evaluate(&params)?;
    trace.push_evals(end, &evals);
    Ok((params, trace))
}

/// Writes `config.txt`, `trace.jsonl`, `params.bin` and `forecasts.csv`
/// (rows of the last evaluation recorded in the trace).
pub fn write_run_dir(dir: &Path, config: &[(String, String)], trace: &RunTrace, params: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cfg = String::new();
    for (k, v) in config {
        cfg.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("config.txt"), cfg)?;
    std::fs::write(dir.join("trace.jsonl"), trace.to_jsonl())?;
    params.save(dir.join("params.bin"))?;
    let last = trace.forecasts().map(|f| f.step).max();
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("forecasts.csv"))?);
    writeln!(f, "pair,rank,depth,predicted,actual,residual")?;
    for r in trace.forecasts().filter(|r| Some(r.step) == last) {
        let x = r.rank;
        writeln!(f, "{},{},{},{},{},{}", r.pair, x.rank, x.depth, x.predicted, x.actual, x.residual)?;
    }
    f.flush()?;
    Ok(())
}
