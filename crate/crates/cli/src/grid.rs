use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use tailcast::rng::derive_seed;
use tailcast_autodiff::ParamSet;
use tailcast_grid::bank::{split_bank, TaskBank};
use tailcast_grid::baselines::{
    comparison_row, condition_metrics, evaluate_params, sft_run, write_comparison_csv, ComparisonRow, Condition,
};
use tailcast_grid::finetune::{run_finetune, write_run_dir, RunTrace};
use tailcast_grid::pipeline::{comparison_rows, run_seed, PipelineConfig};
use tailcast_grid::GridError;

use crate::output::{cell, ensure_dir, io_error, write_manifest, Csv};
use crate::settings::Settings;
use crate::{CliError, Gate, Globals, Outcome, Overrides};

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    /// Generate the seed's task bank and pretrain the policy.
    Pretrain(PretrainArgs),
    /// Forecastability fine-tuning from a pretrained run directory.
    Finetune(TrainArgs),
    /// Regret-minimising SFT baseline with a matched budget.
    Sft(TrainArgs),
    /// Comparison rows for the parameter sets at hand.
    Evaluate(EvaluateArgs),
    /// Every stage for each seed, with the cross-seed direction gates.
    Pipeline(PipelineArgs),
}

impl GridCommand {
    pub fn name(&self) -> &'static str {
        match self {
            GridCommand::Pretrain(_) => "gridworld pretrain",
            GridCommand::Finetune(_) => "gridworld finetune",
            GridCommand::Sft(_) => "gridworld sft",
            GridCommand::Evaluate(_) => "gridworld evaluate",
            GridCommand::Pipeline(_) => "gridworld pipeline",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Pretrained run directory.
    #[arg(long)]
    pub from: PathBuf,
    /// Continue the run already in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Pretrained run directory.
    #[arg(long)]
    pub from: PathBuf,
    /// SFT run directory.
    #[arg(long)]
    pub sft: Option<PathBuf>,
    /// Fine-tuned run directory.
    #[arg(long)]
    pub ours: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

fn usage(e: GridError) -> CliError {
    CliError::Usage(e.to_string())
}

fn resolve(g: &Globals, mut s: Settings, ov: &Overrides) -> Result<(PipelineConfig, Vec<(String, String)>), CliError> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in s.drain_file() {
        cfg.set(&k, &v).map_err(usage)?;
    }
    cfg.seed = g.seed;
    for kv in &ov.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        if k.trim() == "seed" {
            return Err(CliError::Usage("use --seed rather than --set seed=".into()));
        }
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let mut resolved: Vec<(String, String)> = s.finish()?.into_iter().filter(|(k, _)| k != "seed").collect();
    resolved.extend(cfg.to_kv());
    Ok((cfg, resolved))
}

/// Keys that fix the bank, the splits and the network shape.
const BANK_KEYS: [&str; 20] = [
    "seed", "bank_size", "eps", "pretrain_tasks", "train_pairs", "held_out_pairs", "fit", "deploy", "width", "height",
    "min_distance", "trap_density", "max_attempts", "horizon", "gamma", "step_cost", "goal_reward", "trap_penalty",
    "channels", "embed",
];

fn read_config(dir: &Path) -> Result<PipelineConfig, CliError> {
    let path = dir.join("config.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    PipelineConfig::from_kv_text(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn check_compatible(saved: &PipelineConfig, cfg: &PipelineConfig, dir: &Path) -> Result<(), CliError> {
    let a: BTreeMap<String, String> = saved.to_kv().into_iter().collect();
    let b: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
    for key in BANK_KEYS {
        if a.get(key) != b.get(key) {
            return Err(GridError::Mismatch(format!(
                "{} was built with {key}={}, this run has {key}={}",
                dir.display(),
                a.get(key).map_or("?", String::as_str),
                b.get(key).map_or("?", String::as_str)
            ))
            .into());
        }
    }
    Ok(())
}

/// Loads the bank of a pretrained run after checking it belongs to `cfg`.
fn load_pretrained(dir: &Path, cfg: &PipelineConfig) -> Result<(TaskBank, ParamSet), CliError> {
    check_compatible(&read_config(dir)?, cfg, dir)?;
    let bank = TaskBank::load(dir.join("bank.txt"))?;
    if bank.seed != cfg.seed || bank.tasks.len() != cfg.bank_size {
        return Err(GridError::Mismatch(format!(
            "bank in {} has seed {} and {} tasks, expected seed {} and {}",
            dir.display(),
            bank.seed,
            bank.tasks.len(),
            cfg.seed,
            cfg.bank_size
        ))
        .into());
    }
    let params = ParamSet::load(dir.join("params.bin")).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((bank, params))
}

fn load_params(dir: &Path) -> Result<ParamSet, CliError> {
    ParamSet::load(dir.join("params.bin")).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn run(cmd: &GridCommand, g: &Globals, s: Settings) -> Result<Outcome, CliError> {
    match cmd {
        GridCommand::Pretrain(a) => pretrain(a, g, s),
        GridCommand::Finetune(a) => train(a, g, s, false),
        GridCommand::Sft(a) => train(a, g, s, true),
        GridCommand::Evaluate(a) => evaluate(a, g, s),
        GridCommand::Pipeline(a) => pipeline(a, g, s),
    }
}

fn pretrain(a: &PretrainArgs, g: &Globals, s: Settings) -> Result<Outcome, CliError> {
    let (cfg, resolved) = resolve(g, s, &a.overrides)?;
    ensure_dir(&g.out)?;
    let (bank, splits) = cfg.bank(cfg.seed)?;
    let (params, trace) = cfg.pretrained(&bank, &splits)?;
    bank.save(g.out.join("bank.txt"))?;
    params.save(g.out.join("params.bin")).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(g.out.join("config.txt"), cfg.kv_text()).map_err(|e| io_error(&g.out, e))?;
    let mut csv = Csv::new(&["step", "mean_return"]);
    for (i, r) in trace.iter().enumerate() {
        csv.row(&[cell(i), cell(r)]);
    }
    csv.write(&g.out, "pretrain_trace.csv")?;
    write_manifest(&g.out, "gridworld pretrain", &resolved, &["bank.txt", "params.bin", "config.txt", "pretrain_trace.csv"])?;
    println!(
        "pretrained seed {}: {} rare tasks in bank, final batch return {:.4}",
        cfg.seed,
        bank.rare_count(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Outcome(Gate::Skipped))
}

fn train(a: &TrainArgs, g: &Globals, s: Settings, sft: bool) -> Result<Outcome, CliError> {
    let (cfg, resolved) = resolve(g, s, &a.overrides)?;
    let (bank, pretrained) = load_pretrained(&a.from, &cfg)?;
    let splits = split_bank(&bank, &cfg.sizes)?;
    let data = cfg.data(&bank, &splits, g.exec);
    let (params, mut trace) = if a.resume {
        check_compatible(&read_config(&g.out)?, &cfg, &g.out)?;
        let path = g.out.join("trace.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        (load_params(&g.out)?, RunTrace::from_jsonl(&text)?)
    } else {
        (pretrained, RunTrace::default())
    };
    let start = trace.next_step();
    let (params, more) = if sft {
        sft_run(&data, &params, &cfg.meta, cfg.sft_batch(), derive_seed(cfg.seed, "sft"), start)?
    } else {
        run_finetune(&data, &params, &cfg.meta, derive_seed(cfg.seed, "finetune"), start)?
    };
    trace.lines.extend(more.lines);
    write_run_dir(&g.out, &cfg.to_kv(), &trace, &params)?;
    let name = if sft { "gridworld sft" } else { "gridworld finetune" };
    write_manifest(&g.out, name, &resolved, &["config.txt", "trace.jsonl", "params.bin", "forecasts.csv"])?;
    println!("{name}: steps {start}..{} written to {}", trace.next_step(), g.out.display());
    Ok(Outcome(Gate::Skipped))
}

fn evaluate(a: &EvaluateArgs, g: &Globals, s: Settings) -> Result<Outcome, CliError> {
    let (cfg, resolved) = resolve(g, s, &a.overrides)?;
    let (bank, pretrained) = load_pretrained(&a.from, &cfg)?;
    let splits = split_bank(&bank, &cfg.sizes)?;
    let data = cfg.data(&bank, &splits, g.exec);
    let loss = &cfg.meta.loss;
    let load_run = |dir: &Option<PathBuf>| -> Result<Option<ParamSet>, CliError> {
        match dir {
            Some(d) => {
                check_compatible(&read_config(d)?, &cfg, d)?;
                Ok(Some(load_params(d)?))
            }
            None => Ok(None),
        }
    };
    let sft = load_run(&a.sft)?;
    let ours = load_run(&a.ours)?;
    let pre = evaluate_params(&data, &pretrained, loss)?;
    let rows: Vec<ComparisonRow> = match (&sft, &ours) {
        (Some(sp), Some(op)) => {
            comparison_rows(cfg.seed, &pre, &evaluate_params(&data, sp, loss)?, &evaluate_params(&data, op, loss)?)?
        }
        _ => {
            let base = condition_metrics(Condition::Pretrained, &pre)?;
            let mut rows = Vec::new();
            for (params, conds) in [
                (None, [Condition::Pretrained, Condition::Cal]),
                (sft.as_ref(), [Condition::Sft, Condition::SftCal]),
                (ours.as_ref(), [Condition::Ours, Condition::OursCal]),
            ] {
                let eval = match params {
                    None if conds[0] == Condition::Pretrained => pre.clone(),
                    None => continue,
                    Some(p) => evaluate_params(&data, p, loss)?,
                };
                for c in conds {
                    rows.push(comparison_row(cfg.seed, c, condition_metrics(c, &eval)?, base));
                }
            }
            rows
        }
    };
    ensure_dir(&g.out)?;
    write_comparison_csv(&g.out.join("comparison.csv"), &rows)?;
    write_manifest(&g.out, "gridworld evaluate", &resolved, &["comparison.csv"])?;
    print_rows(&rows);
    Ok(Outcome(Gate::Skipped))
}

fn print_rows(rows: &[ComparisonRow]) {
    println!("{:>5} {:<11} {:>11} {:>9} {:>11}", "seed", "condition", "capability", "safety", "forecast");
    for r in rows {
        println!(
            "{:>5} {:<11} {:>11.5} {:>9.5} {:>11.5}",
            r.seed,
            r.condition.to_string(),
            r.metrics.capability,
            r.metrics.safety,
            r.metrics.forecast
        );
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cross-seed medians per condition: `(capability, safety, forecast)`.
pub fn condition_medians(rows: &[ComparisonRow], c: Condition) -> (f64, f64, f64) {
    let pick = |f: fn(&ComparisonRow) -> f64| median(&rows.iter().filter(|r| r.condition == c).map(f).collect::<Vec<_>>());
    (pick(|r| r.metrics.capability), pick(|r| r.metrics.safety), pick(|r| r.metrics.forecast))
}

/// The four direction gates over all seeds' rows.
pub fn direction_gates(rows: &[ComparisonRow]) -> Vec<(&'static str, Gate, String)> {
    let m = |c| condition_medians(rows, c);
    let (pre, cal, ours, ours_cal) = (m(Condition::Pretrained), m(Condition::Cal), m(Condition::Ours), m(Condition::OursCal));
    let gate = |ok: bool| if ok { Gate::Pass } else { Gate::Fail };
    let seeds: Vec<u64> = rows.iter().filter(|r| r.condition == Condition::Pretrained).map(|r| r.seed).collect();
    let cal_identical = seeds.iter().all(|&s| {
        let find = |c| rows.iter().find(|r| r.seed == s && r.condition == c).map(|r| r.metrics);
        match (find(Condition::Pretrained), find(Condition::Cal)) {
            (Some(p), Some(c)) => {
                p.capability.to_bits() == c.capability.to_bits() && p.safety.to_bits() == c.safety.to_bits()
            }
            _ => false,
        }
    });
    vec![
        (
            "ours_forecast_below_pretrained",
            gate(ours.2 < pre.2),
            format!("median forecast error ours {} vs pretrained {}", ours.2, pre.2),
        ),
        (
            "ours_cal_forecast_below_cal",
            gate(ours_cal.2 < cal.2),
            format!("median forecast error ours+cal {} vs cal {}", ours_cal.2, cal.2),
        ),
        (
            "ours_worst_regret_not_above_pretrained",
            gate(ours.1 <= pre.1),
            format!("median worst held-out regret ours {} vs pretrained {}", ours.1, pre.1),
        ),
        (
            "cal_capability_and_safety_identical",
            gate(cal_identical && !seeds.is_empty()),
            format!("bit-identical over {} seeds: {cal_identical}", seeds.len()),
        ),
    ]
}

fn pipeline(a: &PipelineArgs, g: &Globals, s: Settings) -> Result<Outcome, CliError> {
    let (cfg, resolved) = resolve(g, s, &a.overrides)?;
    ensure_dir(&g.out)?;
    let mut rows = Vec::new();
    for i in 0..cfg.seeds {
        let seed = cfg.seed + i as u64;
        eprintln!("seed {seed}: running");
        let mut seed_cfg = cfg;
        seed_cfg.seed = seed;
        let run = run_seed(&seed_cfg, seed, g.exec)?;
        let dir = g.out.join(format!("seed-{seed}"));
        ensure_dir(&dir.join("pretrained"))?;
        run.pretrained.save(dir.join("pretrained/params.bin")).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join("pretrained/config.txt"), seed_cfg.kv_text()).map_err(|e| io_error(&dir, e))?;
        write_run_dir(&dir.join("ours"), &seed_cfg.to_kv(), &run.ours_trace, &run.ours)?;
        write_run_dir(&dir.join("sft"), &seed_cfg.to_kv(), &run.sft_trace, &run.sft)?;
        write_comparison_csv(&dir.join("comparison.csv"), &run.rows)?;
        rows.extend(run.rows);
    }
    write_comparison_csv(&g.out.join("comparison.csv"), &rows)?;
    print_rows(&rows);

    let mut summary = Csv::new(&["condition", "median_capability", "median_safety", "median_forecast_worst_sq_error"]);
    for c in Condition::ALL {
        let (cap, saf, fc) = condition_medians(&rows, c);
        summary.row(&[cell(c), cell(cap), cell(saf), cell(fc)]);
    }
    summary.write(&g.out, "summary.csv")?;
    let gates = direction_gates(&rows);
    let mut gate_csv = Csv::new(&["gate", "result", "detail"]);
    for (name, gate, detail) in &gates {
        println!("{name}: {gate} ({detail})");
        gate_csv.row(&[cell(name), cell(gate), format!("\"{detail}\"")]);
    }
    gate_csv.write(&g.out, "gates.csv")?;
    write_manifest(&g.out, "gridworld pipeline", &resolved, &["comparison.csv", "summary.csv", "gates.csv"])?;
    Ok(Outcome::of(gates.into_iter().map(|g| g.1)))
}
