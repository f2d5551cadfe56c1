use std::path::PathBuf;

use clap::Args;
use tailcast::decomposition::{
    empirical_decomposition, estimator_error_mc, hazard_diagnostic, k_sweep, rank_coefficient_mc,
    DecompositionConfig, DecompositionInput, EstimatorTarget, FitSampler, ScoreSampler,
};
use tailcast::forecaster::{fit_transformed, sort_descending, PlottingScheme, ScoreTransform};
use tailcast::rng::derive_seed;
use tailcast::scores::read_scores;
use tailcast::TailDistribution;
use tailcast_grid::finetune::{coverage_analysis, simulate_coverage};

use crate::output::{cell, ensure_dir, opt_cell, write_manifest, Csv};
use crate::settings::{Count, DistList, List, Settings};
use crate::{CliError, Gate, Globals, Outcome};

/// `(R, b_inv, b_inv_tilde)` at k = 10.
pub const RANK_TABLE_K10: [(f64, f64, f64); 5] = [
    (2.0, 0.282, 0.859),
    (5.0, 0.574, 1.151),
    (10.0, 0.794, 1.371),
    (100.0, 1.526, 2.103),
    (1000.0, 2.258, 2.835),
];

/// The distributions decomposed when no input is named.
pub const CANONICAL_SIX: &str =
    "exp:rate=1;lognormal:mu=0,sigma=0.5;uniform:lo=0,hi=1;pareto:alpha=3,xmin=1;beta:a=2,b=2;mixture:";

fn reference_rank(k: usize, big_r: f64) -> Option<(f64, f64)> {
    (k == 10).then_some(())?;
    RANK_TABLE_K10.iter().find(|r| r.0 == big_r).map(|r| (r.1, r.2))
}

fn load_scores(path: &PathBuf) -> Result<Vec<f64>, CliError> {
    read_scores(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Args)]
pub struct ValidateRankArgs {
    /// Top order statistics in the tail fit
    #[arg(long)]
    pub k: Option<usize>,
    /// Deployment ratios R = N/M, comma-separated.
    #[arg(long = "r-list")]
    pub r_list: Option<List<f64>>,
    /// Fit size of the whole-estimator check on Exp(1).
    #[arg(long)]
    pub m: Option<Count>,
    /// Whole-estimator trials; defaults to min(1e5, --trials), 0 skips.
    #[arg(long = "estimator-trials")]
    pub estimator_trials: Option<Count>,
    /// Allowed distance from the reference table.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Coarsest resolvable whole-estimator interval half-width.
    #[arg(long)]
    pub resolution: Option<f64>,
}

fn estimator_gate(mean: f64, se: f64, theory: f64, theory_se: f64, resolution: f64) -> Gate {
    let half = 1.96 * (se * se + theory_se * theory_se).sqrt();
    if !half.is_finite() || half > resolution {
        Gate::Inconclusive
    } else if (mean - theory).abs() <= half {
        Gate::Pass
    } else {
        Gate::Fail
    }
}

pub fn validate_rank(a: &ValidateRankArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    let trials = s.take("trials", trials, Count(10_000_000))?.0;
    let k = s.take("k", a.k, 10)?;
    let r_list = s.take("r_list", a.r_list.clone(), List(RANK_TABLE_K10.iter().map(|r| r.0).collect()))?.0;
    let m = s.take("m", a.m, Count(10_000))?.usize();
    let est_trials = s.take("estimator_trials", a.estimator_trials, Count(trials.min(100_000)))?.0;
    let tol = s.take("tolerance", a.tolerance, 0.005)?;
    let resolution = s.take("resolution", a.resolution, 0.05)?;
    let resolved = s.finish()?;
    if k < 2 {
        return Err(CliError::Usage(format!("k must be at least 2, got {k}")));
    }
    if let Some(r) = r_list.iter().find(|&&r| !(r > 1.0) || !r.is_finite()) {
        return Err(CliError::Usage(format!("deployment ratio R must exceed 1, got {r}")));
    }
    if trials == 0 {
        return Err(CliError::Usage("trials must be positive".into()));
    }
    if est_trials > 0 && k > m {
        return Err(CliError::Usage(format!("k={k} exceeds m={m}")));
    }
    ensure_dir(&g.out)?;

    let exp1 = TailDistribution::exp(1.0)?;
    let mut csv = Csv::new(&[
        "R", "n", "b_inv", "b_inv_ref", "b_inv_tilde", "b_inv_tilde_ref", "rank_se", "table_gate",
        "est_realized_mean", "est_realized_se", "est_realized_gate", "est_population_mean", "est_population_se",
        "est_population_gate",
    ]);
    let mut gates = Vec::new();
    println!("{:>7} {:>9} {:>7} {:>9} {:>7} {:>9} {:>13} {:>13} {:>13}", "R", "b_inv", "ref", "tilde", "ref", "se", "table", "vs max", "vs quantile");
    for &big_r in &r_list {
        let rc = rank_coefficient_mc(k, big_r, trials, g.exec, derive_seed(g.seed, &format!("rank-{big_r}")))?;
        let reference = reference_rank(k, big_r);
        let table = match reference {
            None => Gate::Skipped,
            Some(_) if !(1.96 * rc.se <= tol) => Gate::Inconclusive,
            Some((b, t)) if (rc.b_inv - b).abs() <= tol && (rc.b_inv_tilde - t).abs() <= tol => Gate::Pass,
            Some(_) => Gate::Fail,
        };
        let n = (m as f64 * big_r).round() as usize;
        let mut est = [(f64::NAN, f64::NAN, Gate::Skipped); 2];
        if est_trials > 0 {
            for (slot, (target, theory, label)) in est.iter_mut().zip([
                (EstimatorTarget::RealizedMax, rc.b_inv, "max"),
                (EstimatorTarget::PopulationQuantile, rc.b_inv_tilde, "quantile"),
            ]) {
                let st = estimator_error_mc(
                    &exp1,
                    m,
                    n,
                    k,
                    est_trials,
                    target,
                    FitSampler::OrderStatistics,
                    g.exec,
                    derive_seed(g.seed, &format!("estimator-{label}-{big_r}")),
                )?;
                *slot = (st.mean(), st.se(), estimator_gate(st.mean(), st.se(), theory, rc.se, resolution));
            }
        }
        gates.extend([table, est[0].2, est[1].2]);
        println!(
            "{:>7} {:>9.4} {:>7} {:>9.4} {:>7} {:>9.2e} {:>13} {:>13} {:>13}",
            big_r,
            rc.b_inv,
            reference.map_or("-".into(), |r| format!("{:.3}", r.0)),
            rc.b_inv_tilde,
            reference.map_or("-".into(), |r| format!("{:.3}", r.1)),
            rc.se,
            table.to_string(),
            format!("{:.4} {}", est[0].0, est[0].2),
            format!("{:.4} {}", est[1].0, est[1].2),
        );
        csv.row(&[
            cell(big_r),
            cell(n),
            cell(rc.b_inv),
            opt_cell(reference.map(|r| r.0)),
            cell(rc.b_inv_tilde),
            opt_cell(reference.map(|r| r.1)),
            cell(rc.se),
            cell(table),
            cell(est[0].0),
            cell(est[0].1),
            cell(est[0].2),
            cell(est[1].0),
            cell(est[1].1),
            cell(est[1].2),
        ]);
    }
    csv.write(&g.out, "rank_validation.csv")?;
    write_manifest(&g.out, "validate-rank", &resolved, &["rank_validation.csv"])?;
    let outcome = Outcome::of(gates);
    println!("overall: {}", outcome.0);
    Ok(outcome)
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Distribution specs separated by `;` (default: the six canonical laws).
    #[arg(long)]
    pub dist: Option<DistList>,
    /// Score file (one number per line) instead of distributions.
    #[arg(long, conflicts_with = "dist")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<Count>,
    #[arg(long)]
    pub n: Option<Count>,
    /// Top order statistics in the tail fit
    #[arg(long)]
    pub k: Option<usize>,
    /// Half-width of the local quadratic window (score files).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long = "rank-trials")]
    pub rank_trials: Option<Count>,
    /// `with-replacement` or `partition` (score files).
    #[arg(long)]
    pub sampler: Option<String>,
}

fn parse_sampler(s: &str) -> Result<ScoreSampler, CliError> {
    match s {
        "with-replacement" => Ok(ScoreSampler::WithReplacement),
        "partition" => Ok(ScoreSampler::PartitionPermutation),
        o => Err(CliError::Usage(format!("unknown sampler `{o}` (with-replacement, partition)"))),
    }
}

pub fn decompose(a: &DecomposeArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    let trials = s.take("trials", trials, Count(100_000))?.0;
    let scores_path: Option<String> = s.take_opt("scores", a.scores.as_ref().map(|p| p.display().to_string()))?;
    let dists = if scores_path.is_none() {
        Some(s.take("dist", a.dist.clone(), CANONICAL_SIX.parse().map_err(CliError::Usage)?)?)
    } else {
        if s.take_opt::<DistList>("dist", None)?.is_some() {
            return Err(CliError::Usage("give either dist or scores, not both".into()));
        }
        None
    };
    let m = s.take("m", a.m, Count(5000))?.usize();
    let n = s.take("n", a.n, Count(50_000))?.usize();
    let k = s.take("k", a.k, 10)?;
    let delta = s.take("delta", a.delta, 0.5)?;
    let rank_trials = s.take("rank_trials", a.rank_trials, Count(1_000_000))?.0;
    let sampler = parse_sampler(&s.take("sampler", a.sampler.clone(), "with-replacement".to_string())?)?;
    let resolved = s.finish()?;
    if k < 2 || k > m || n <= m {
        return Err(CliError::Usage(format!("need 2 <= k <= m < n, got k={k} m={m} n={n}")));
    }
    if trials == 0 || rank_trials == 0 {
        return Err(CliError::Usage("trials must be positive".into()));
    }
    ensure_dir(&g.out)?;
    let cfg = DecompositionConfig {
        m,
        n,
        k,
        trials,
        rank_trials,
        delta,
        sampler,
        fit_sampler: FitSampler::OrderStatistics,
        exec: g.exec,
        seed: g.seed,
    };

    let mut inputs: Vec<(String, Option<TailDistribution>)> = Vec::new();
    let data = match &scores_path {
        Some(p) => {
            inputs.push((p.clone(), None));
            load_scores(&PathBuf::from(p))?
        }
        None => {
            for d in dists.expect("dist resolved when no scores").0 {
                inputs.push((d.to_string(), Some(d)));
            }
            Vec::new()
        }
    };
    let mut csv = Csv::new(&["input", "component", "value_qprime_units", "value_score_units", "se"]);
    let mut slopes = Csv::new(&["input", "q1_hat", "q2_hat"]);
    println!("{:<44} {:>9} {:>9} {:>9} {:>9} {:>9}", "input", "rank", "curv", "occup", "resid", "total");
    for (name, dist) in &inputs {
        let input = match dist {
            Some(d) => DecompositionInput::Distribution(d),
            None => DecompositionInput::Scores(&data),
        };
        let rep = empirical_decomposition(input, &cfg)?;
        println!(
            "{:<44} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            name, rep.rank, rep.curvature, rep.occupancy, rep.residual, rep.empirical_total
        );
        let quoted = format!("\"{name}\"");
        for (component, q, score, se) in rep.rows() {
            // adding +0 turns a signed zero into 0
            csv.row(&[quoted.clone(), cell(component), cell(q + 0.0), cell(score + 0.0), cell(se)]);
        }
        slopes.row(&[quoted, cell(rep.q1_hat), cell(rep.q2_hat)]);
    }
    csv.write(&g.out, "decomposition.csv")?;
    slopes.write(&g.out, "tail_slopes.csv")?;
    write_manifest(&g.out, "decompose", &resolved, &["decomposition.csv", "tail_slopes.csv"])?;
    Ok(Outcome(Gate::Skipped))
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    /// Fit-set score file.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Fit-set size; defaults to the number of scores in the file.
    #[arg(long)]
    pub m: Option<Count>,
    /// Deployment sizes, comma-separated.
    #[arg(long = "n-list")]
    pub n_list: Option<List<Count>>,
    /// Top order statistics in the tail fit
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub scheme: Option<PlottingScheme>,
    #[arg(long)]
    pub transform: Option<ScoreTransform>,
}

pub fn forecast(a: &ForecastArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    if trials.is_some() {
        return Err(CliError::Usage("--trials does not apply to forecast".into()));
    }
    let path: String = s
        .take_opt("scores", a.scores.as_ref().map(|p| p.display().to_string()))?
        .ok_or_else(|| CliError::Usage("forecast needs --scores".into()))?;
    let data = load_scores(&PathBuf::from(&path))?;
    let m = s.take("m", a.m, Count(data.len() as u64))?.usize();
    let n_list = s.take("n_list", a.n_list.clone(), List(vec![Count(1_000_000)]))?.0;
    let k = s.take("k", a.k, 10)?;
    let scheme = s.take("scheme", a.scheme, PlottingScheme::Weibull)?;
    let transform = s.take("transform", a.transform, ScoreTransform::Identity)?;
    let resolved = s.finish()?;
    if k > data.len() {
        return Err(CliError::Runtime(format!("k={k} exceeds the {} scores in {path}", data.len())));
    }
    if m < data.len() {
        return Err(CliError::Usage(format!("m={m} is smaller than the {} scores in the file", data.len())));
    }
    ensure_dir(&g.out)?;
    let mut psi = data.iter().map(|&x| transform.forward(x)).collect::<Result<Vec<_>, _>>()?;
    sort_descending(&mut psi)?;
    let fit = fit_transformed(&psi[..k], m, scheme, transform)?;

    let mut header = vec!["n", "depth", "predicted_transformed", "predicted_score"];
    if transform == ScoreTransform::GumbelProb {
        header.push("predicted_log_p");
    }
    let mut csv = Csv::new(&header);
    println!("fit: a={} b={} (k={k}, m={m}, {scheme}, {transform})", fit.a, fit.b);
    for n in n_list {
        let q = fit.predict_quantile(n.0 as f64)?;
        let mut row = vec![cell(n), cell((n.0 as f64).ln()), cell(q), cell(transform.inverse(q))];
        if transform == ScoreTransform::GumbelProb {
            row.push(cell(transform.to_loss_space(q)));
        }
        println!("n={n}: {}", row[2..].join(" "));
        csv.row(&row);
    }
    csv.write(&g.out, "predictions.csv")?;
    std::fs::write(g.out.join("fit.txt"), fit.to_record()).map_err(|e| crate::output::io_error(&g.out, e))?;
    write_manifest(&g.out, "forecast", &resolved, &["predictions.csv", "fit.txt"])?;
    Ok(Outcome(Gate::Skipped))
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    /// Cache size C.
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Top order statistics in the tail fit
    #[arg(long)]
    pub k: Option<usize>,
}

pub fn coverage(a: &CoverageArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    let draws = s.take("trials", trials, Count(1_000_000))?.0;
    let c = s.take("c", a.c, 296)?;
    let m = s.take("m", a.m, 96)?;
    let n = s.take("n", a.n, 1920)?;
    let k = s.take("k", a.k, 10)?;
    let resolved = s.finish()?;
    if c > m + n || m == 0 {
        return Err(CliError::Usage(format!("need 0 < m and C <= m + n, got C={c} m={m} n={n}")));
    }
    ensure_dir(&g.out)?;
    let mut csv = Csv::new(&["method", "miss_probability", "extra_conditional", "extra_unconditional", "miss_se", "deploy_cached_min"]);
    let exact = coverage_analysis(c, m, n, k)?;
    let floor = c.saturating_sub(m);
    csv.row(&[
        cell("exact"),
        cell(exact.miss_probability),
        cell(exact.extra_conditional),
        cell(exact.extra_unconditional),
        cell(0.0),
        cell(floor),
    ]);
    println!(
        "exact: P[miss]={:.5} extra|miss={:.3} extra/step={:.4} deploy cached >= {floor}",
        exact.miss_probability, exact.extra_conditional, exact.extra_unconditional
    );
    let mut outputs = vec!["coverage.csv"];
    if draws > 0 {
        let (sim, se) = simulate_coverage(c, m, n, k, draws, g.exec, derive_seed(g.seed, "coverage"))?;
        csv.row(&[
            cell("simulated"),
            cell(sim.miss_probability),
            cell(sim.extra_conditional),
            cell(sim.extra_unconditional),
            cell(se),
            cell(floor),
        ]);
        println!(
            "simulated ({draws} draws): P[miss]={:.5} (se {:.1e}) extra|miss={:.3} extra/step={:.4}",
            sim.miss_probability, se, sim.extra_conditional, sim.extra_unconditional
        );
    } else {
        outputs.truncate(1);
    }
    csv.write(&g.out, "coverage.csv")?;
    write_manifest(&g.out, "coverage", &resolved, &outputs)?;
    Ok(Outcome(Gate::Skipped))
}

#[derive(Debug, Clone, Args)]
pub struct KsweepArgs {
    #[arg(long)]
    pub dist: Option<TailDistribution>,
    #[arg(long, conflicts_with = "dist")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<Count>,
    /// Deployment ratio R = N/M.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long = "k-list")]
    pub k_list: Option<List<usize>>,
    #[arg(long = "rank-trials")]
    pub rank_trials: Option<Count>,
}

pub fn ksweep(a: &KsweepArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    let trials = s.take("trials", trials, Count(100_000))?.0;
    let scores_path: Option<String> = s.take_opt("scores", a.scores.as_ref().map(|p| p.display().to_string()))?;
    let dist = match scores_path {
        None => Some(s.take("dist", a.dist.clone(), TailDistribution::exp(1.0)?)?),
        Some(_) => None,
    };
    let m = s.take("m", a.m, Count(5000))?.usize();
    let big_r = s.take("r", a.r, 10.0)?;
    let k_list = s.take("k_list", a.k_list.clone(), List(vec![10, 20, 50, 100, 200, 500]))?.0;
    let rank_trials = s.take("rank_trials", a.rank_trials, Count(1_000_000))?.0;
    let resolved = s.finish()?;
    if !(big_r > 1.0) {
        return Err(CliError::Usage(format!("deployment ratio R must exceed 1, got {big_r}")));
    }
    if let Some(k) = k_list.iter().find(|&&k| k < 2 || k > m) {
        return Err(CliError::Usage(format!("k={k} not in 2..={m}")));
    }
    ensure_dir(&g.out)?;
    let data = match &scores_path {
        Some(p) => load_scores(&PathBuf::from(p))?,
        None => Vec::new(),
    };
    let input = match &dist {
        Some(d) => DecompositionInput::Distribution(d),
        None => DecompositionInput::Scores(&data),
    };
    let rows = k_sweep(input, m, big_r, &k_list, trials, rank_trials, g.exec, g.seed)?;
    let mut csv = Csv::new(&["k", "mean_error", "se", "rank_theory"]);
    for r in rows {
        println!("k={:<5} mean error {:+.4} (se {:.4})  rank theory {:+.4}", r.k, r.mean_error, r.se, r.rank_theory);
        csv.row(&[cell(r.k), cell(r.mean_error), cell(r.se), cell(r.rank_theory)]);
    }
    csv.write(&g.out, "ksweep.csv")?;
    write_manifest(&g.out, "ksweep", &resolved, &["ksweep.csv"])?;
    Ok(Outcome(Gate::Skipped))
}

#[derive(Debug, Clone, Args)]
pub struct RankGridArgs {
    #[arg(long = "k-list")]
    pub k_list: Option<List<usize>>,
    #[arg(long = "r-list")]
    pub r_list: Option<List<f64>>,
}

pub fn rank_grid(a: &RankGridArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    let trials = s.take("trials", trials, Count(100_000))?.0;
    let k_list = s.take("k_list", a.k_list.clone(), List(vec![2, 3, 5, 10, 20, 50, 100, 200, 500]))?.0;
    let r_list = s.take("r_list", a.r_list.clone(), List(vec![2.0, 5.0, 10.0, 100.0, 1000.0]))?.0;
    let resolved = s.finish()?;
    if let Some(r) = r_list.iter().find(|&&r| !(r > 1.0)) {
        return Err(CliError::Usage(format!("deployment ratio R must exceed 1, got {r}")));
    }
    if let Some(k) = k_list.iter().find(|&&k| k < 2) {
        return Err(CliError::Usage(format!("k must be at least 2, got {k}")));
    }
    if trials == 0 {
        return Err(CliError::Usage("trials must be positive".into()));
    }
    ensure_dir(&g.out)?;
    let mut csv = Csv::new(&["k", "R", "b_inv", "b_inv_tilde", "se"]);
    for &k in &k_list {
        for &big_r in &r_list {
            let rc = rank_coefficient_mc(k, big_r, trials, g.exec, derive_seed(g.seed, &format!("grid-{k}-{big_r}")))?;
            csv.row(&[cell(k), cell(big_r), cell(rc.b_inv), cell(rc.b_inv_tilde), cell(rc.se)]);
        }
    }
    csv.write(&g.out, "rank_grid.csv")?;
    write_manifest(&g.out, "rank-grid", &resolved, &["rank_grid.csv"])?;
    Ok(Outcome(Gate::Skipped))
}

#[derive(Debug, Clone, Args)]
pub struct HazardArgs {
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Evenly spaced grid points from the median to the second-largest score.
    #[arg(long)]
    pub points: Option<usize>,
}

pub fn hazard(a: &HazardArgs, trials: Option<Count>, g: &Globals, mut s: Settings) -> Result<Outcome, CliError> {
    if trials.is_some() {
        return Err(CliError::Usage("--trials does not apply to hazard".into()));
    }
    let path: String = s
        .take_opt("scores", a.scores.as_ref().map(|p| p.display().to_string()))?
        .ok_or_else(|| CliError::Usage("hazard needs --scores".into()))?;
    let points = s.take("points", a.points, 40)?;
    let resolved = s.finish()?;
    if points < 2 {
        return Err(CliError::Usage("need at least 2 grid points".into()));
    }
    let data = load_scores(&PathBuf::from(&path))?;
    let mut sorted = data.clone();
    sort_descending(&mut sorted)?;
    if sorted.len() < 2 {
        return Err(CliError::Runtime("too few scores".into()));
    }
    let (lo, hi) = (sorted[sorted.len() / 2], sorted[1]);
    if !(hi > lo) {
        return Err(CliError::Runtime("upper half of the scores is constant".into()));
    }
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    ensure_dir(&g.out)?;
    let rows = hazard_diagnostic(&data, &grid)?;
    let mut csv = Csv::new(&["score", "survival", "log_hazard", "count"]);
    for r in rows {
        csv.row(&[cell(r.score), cell(r.survival), opt_cell(r.log_hazard), cell(r.count)]);
    }
    csv.write(&g.out, "hazard.csv")?;
    write_manifest(&g.out, "hazard", &resolved, &["hazard.csv"])?;
    Ok(Outcome(Gate::Skipped))
}
