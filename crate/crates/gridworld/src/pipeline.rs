//! Per-seed experiment pipeline: bank, splits, pretraining, both training
//! conditions and the comparison grid.

use std::collections::BTreeMap;

use tailcast::rng::{derive_seed, stream};
use tailcast::Execution;
use tailcast_autodiff::ParamSet;

use crate::bank::{generate_bank, split_bank, SplitSizes, Splits, TaskBank, DEFAULT_RARE_FRACTION};
use crate::baselines::{
    comparison_row, condition_metrics, evaluate_params, matched_sft_batch, sft_run, ComparisonRow, Condition,
    ParamsEval,
};
use crate::env::{EnvParams, LayoutParams};
use crate::error::{GridError, Result};
use crate::finetune::{run_finetune, MetaRunConfig, RunTrace, TrainingData};
use crate::policy::{init_params, pretrain, NetConfig, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub seeds: usize,
    pub bank_size: usize,
    pub eps: f64,
    pub sizes: SplitSizes,
    pub layout: LayoutParams,
    pub env: EnvParams,
    pub channels: usize,
    pub embed: usize,
    pub pretrain: PretrainConfig,
    pub meta: MetaRunConfig,
    /// Per-pool SFT batch; 0 selects the evaluation-matched size.
    pub sft_batch: usize,
}

impl Default for PipelineConfig {
    /// Desk scale: full bank and split shapes, shortened training.
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            seeds: 5,
            bank_size: 52_000,
            eps: DEFAULT_RARE_FRACTION,
            sizes: SplitSizes::default(),
            layout: LayoutParams::default(),
            env: EnvParams::default(),
            channels: 32,
            embed: 64,
            pretrain: PretrainConfig { lr: 1e-3, ..PretrainConfig::default() },
            meta: MetaRunConfig { steps: 40, pools_per_step: 4, lr: 1e-3, eval_every: 0, ..MetaRunConfig::default() },
            sft_batch: 0,
        }
    }
}

impl PipelineConfig {
    /// Training lengths and learning rates of the reference run.
    pub fn reference() -> Self {
        let d = Self::default();
        PipelineConfig {
            seeds: 30,
            pretrain: PretrainConfig::default(),
            meta: MetaRunConfig::default(),
            ..d
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            width: self.layout.width,
            height: self.layout.height,
            horizon: self.env.horizon,
            channels: self.channels,
            embed: self.embed,
        }
    }

    pub fn sft_batch(&self) -> usize {
        if self.sft_batch == 0 {
            matched_sft_batch(&self.meta)
        } else {
            self.sft_batch
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let m = &self.meta;
        let l = &m.loss;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("seeds", self.seeds.to_string()),
            ("bank_size", self.bank_size.to_string()),
            ("eps", self.eps.to_string()),
            ("pretrain_tasks", self.sizes.pretrain.to_string()),
            ("train_pairs", self.sizes.train_pairs.to_string()),
            ("held_out_pairs", self.sizes.held_out_pairs.to_string()),
            ("fit", self.sizes.fit.to_string()),
            ("deploy", self.sizes.deploy.to_string()),
            ("width", self.layout.width.to_string()),
            ("height", self.layout.height.to_string()),
            ("min_distance", self.layout.min_distance.to_string()),
            ("trap_density", self.layout.trap_density.to_string()),
            ("max_attempts", self.layout.max_attempts.to_string()),
            ("horizon", self.env.horizon.to_string()),
            ("gamma", self.env.gamma.to_string()),
            ("step_cost", self.env.step_cost.to_string()),
            ("goal_reward", self.env.goal_reward.to_string()),
            ("trap_penalty", self.env.trap_penalty.to_string()),
            ("channels", self.channels.to_string()),
            ("embed", self.embed.to_string()),
            ("pretrain_steps", self.pretrain.steps.to_string()),
            ("pretrain_batch", self.pretrain.batch.to_string()),
            ("pretrain_lr", self.pretrain.lr.to_string()),
            ("k", l.k.to_string()),
            ("scheme", l.scheme.to_string()),
            ("transform", l.transform.to_string()),
            ("weighting", l.weighting.to_string()),
            ("loss_space", l.space.to_string()),
            ("iog", l.iog.to_string()),
            ("cache", m.c.to_string()),
            ("rho", m.rho.to_string()),
            ("n_perm", m.n_perm.to_string()),
            ("steps", m.steps.to_string()),
            ("lr", m.lr.to_string()),
            ("lambda", m.lambda.to_string()),
            ("pools_per_step", m.pools_per_step.to_string()),
            ("eval_every", m.eval_every.to_string()),
            ("clip", m.clip.to_string()),
            ("weight_decay", m.weight_decay.to_string()),
            ("reg_batch", m.reg_batch.to_string()),
            ("sft_batch", self.sft_batch.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e| GridError::Parse(format!("{key}={v}: {e}")))
        }
        let m = &mut self.meta;
        match key {
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "bank_size" => self.bank_size = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "pretrain_tasks" => self.sizes.pretrain = num(key, value)?,
            "train_pairs" => self.sizes.train_pairs = num(key, value)?,
            "held_out_pairs" => self.sizes.held_out_pairs = num(key, value)?,
            "fit" => {
                self.sizes.fit = num(key, value)?;
                m.m = self.sizes.fit;
            }
            "deploy" => {
                self.sizes.deploy = num(key, value)?;
                m.n = self.sizes.deploy;
            }
            "width" => self.layout.width = num(key, value)?,
            "height" => self.layout.height = num(key, value)?,
            "min_distance" => self.layout.min_distance = num(key, value)?,
            "trap_density" => self.layout.trap_density = num(key, value)?,
            "max_attempts" => self.layout.max_attempts = num(key, value)?,
            "horizon" => self.env.horizon = num(key, value)?,
            "gamma" => self.env.gamma = num(key, value)?,
            "step_cost" => self.env.step_cost = num(key, value)?,
            "goal_reward" => self.env.goal_reward = num(key, value)?,
            "trap_penalty" => self.env.trap_penalty = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "embed" => self.embed = num(key, value)?,
            "pretrain_steps" => self.pretrain.steps = num(key, value)?,
            "pretrain_batch" => self.pretrain.batch = num(key, value)?,
            "pretrain_lr" => self.pretrain.lr = num(key, value)?,
            "k" => m.loss.k = num(key, value)?,
            "scheme" => m.loss.scheme = value.parse()?,
            "transform" => m.loss.transform = value.parse()?,
            "weighting" => m.loss.weighting = value.parse()?,
            "loss_space" => m.loss.space = value.parse()?,
            "iog" => m.loss.iog = value.parse()?,
            "cache" => m.c = num(key, value)?,
            "rho" => m.rho = num(key, value)?,
            "n_perm" => m.n_perm = num(key, value)?,
            "steps" => m.steps = num(key, value)?,
            "lr" => m.lr = num(key, value)?,
            "lambda" => m.lambda = num(key, value)?,
            "pools_per_step" => m.pools_per_step = num(key, value)?,
            "eval_every" => m.eval_every = num(key, value)?,
            "clip" => m.clip = num(key, value)?,
            "weight_decay" => m.weight_decay = num(key, value)?,
            "reg_batch" => m.reg_batch = num(key, value)?,
            "sft_batch" => self.sft_batch = num(key, value)?,
            o => return Err(GridError::Parse(format!("unknown config key `{o}`"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GridError::Parse(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn kv_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.meta.m != self.sizes.fit || self.meta.n != self.sizes.deploy {
            return Err(GridError::InvalidParameter("fit/deploy sizes disagree with the run config".into()));
        }
        if self.seeds == 0 {
            return Err(GridError::InvalidParameter("seeds must be positive".into()));
        }
        self.meta.validate()
    }

    /// The bank and splits of seed `seed`.
    pub fn bank(&self, seed: u64) -> Result<(TaskBank, Splits)> {
        let bank = generate_bank(seed, self.bank_size, self.eps, &self.layout, &self.env)?;
        let splits = split_bank(&bank, &self.sizes)?;
        Ok((bank, splits))
    }

    /// Freshly initialised and pretrained parameters with the return trace.
    pub fn pretrained(&self, bank: &TaskBank, splits: &Splits) -> Result<(ParamSet, Vec<f64>)> {
        let net = self.net();
        let mut params = init_params(&net, &mut stream(derive_seed(bank.seed, "init"), 0));
        let tasks: Vec<_> = splits.pretrain.iter().map(|&i| bank.tasks[i].clone()).collect();
        let mut rng = stream(derive_seed(bank.seed, "pretrain"), 0);
        let trace = pretrain(&net, &mut params, &self.env, &tasks, &self.pretrain, &mut rng)?;
        Ok((params, trace))
    }

    pub fn data<'a>(&self, bank: &'a TaskBank, splits: &'a Splits, exec: Execution) -> TrainingData<'a> {
        TrainingData {
            net: self.net(),
            env: self.env,
            tasks: &bank.tasks,
            train: &splits.train,
            held_out: &splits.held_out,
            held_in: &splits.pretrain,
            exec,
        }
    }
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub pretrained: ParamSet,
    pub pretrain_trace: Vec<f64>,
    pub ours: ParamSet,
    pub ours_trace: RunTrace,
    pub sft: ParamSet,
    pub sft_trace: RunTrace,
    pub evals: BTreeMap<&'static str, ParamsEval>,
    pub rows: Vec<ComparisonRow>,
}

/// Builds all six condition rows from the three evaluated parameter sets.
pub fn comparison_rows(seed: u64, pre: &ParamsEval, sft: &ParamsEval, ours: &ParamsEval) -> Result<Vec<ComparisonRow>> {
    let base = condition_metrics(Condition::Pretrained, pre)?;
    Condition::ALL
        .into_iter()
        .map(|c| {
            let eval = match c {
                Condition::Pretrained | Condition::Cal => pre,
                Condition::Sft | Condition::SftCal => sft,
                Condition::Ours | Condition::OursCal => ours,
            };
            Ok(comparison_row(seed, c, condition_metrics(c, eval)?, base))
        })
        .collect()
}

/// Runs the whole pipeline for one seed.
pub fn run_seed(cfg: &PipelineConfig, seed: u64, exec: Execution) -> Result<SeedRun> {
    cfg.validate()?;
    let (bank, splits) = cfg.bank(seed)?;
    let (pretrained, pretrain_trace) = cfg.pretrained(&bank, &splits)?;
    let data = cfg.data(&bank, &splits, exec);
    let (ours, ours_trace) = run_finetune(&data, &pretrained, &cfg.meta, derive_seed(seed, "finetune"), 0)?;
    let (sft, sft_trace) = sft_run(&data, &pretrained, &cfg.meta, cfg.sft_batch(), derive_seed(seed, "sft"), 0)?;
    let loss = &cfg.meta.loss;
    let mut evals = BTreeMap::new();
    evals.insert("pretrained", evaluate_params(&data, &pretrained, loss)?);
    evals.insert("sft", evaluate_params(&data, &sft, loss)?);
    evals.insert("ours", evaluate_params(&data, &ours, loss)?);
    let rows = comparison_rows(seed, &evals["pretrained"], &evals["sft"], &evals["ours"])?;
    Ok(SeedRun { seed, pretrained, pretrain_trace, ours, ours_trace, sft, sft_trace, evals, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_unknown_keys() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_kv_text(&cfg.kv_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(PipelineConfig::from_kv_text("bogus=1").is_err());
        assert!(PipelineConfig::from_kv_text("steps").is_err());
        let c = PipelineConfig::from_kv_text("# note\nsteps = 7\n").unwrap();
        assert_eq!(c.meta.steps, 7);
    }
}
