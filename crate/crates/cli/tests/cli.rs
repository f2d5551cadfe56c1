use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "bank_size=600\neps=0.05\nwidth=4\nheight=4\nmin_distance=3\ntrap_density=0.3\nhorizon=5\n\
pretrain_tasks=40\ntrain_pairs=4\nheld_out_pairs=2\nfit=12\ndeploy=60\nchannels=6\nembed=6\npretrain_steps=20\n\
cache=20\nrho=2\nk=4\nsteps=2\npools_per_step=2\nreg_batch=4\n";

fn tailcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailcast")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&tailcast(&["no-such-command"])), 1);
    assert_eq!(code(&tailcast(&["validate-rank", "--r-list", "1,5"])), 1);
    assert_eq!(code(&tailcast(&["validate-rank", "--r-list", "0.5"])), 1);
    assert_eq!(code(&tailcast(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "c=296\nbogus=1\n").unwrap();
    let o = tailcast(&["coverage", "--config", path(&cfg), "--trials", "0", "--out", path(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn small_trial_counts_are_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailcast(&["validate-rank", "--trials", "10", "--out", path(dir.path())]);
    assert_eq!(code(&o), 3);
    let csv = std::fs::read_to_string(dir.path().join("rank_validation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().skip(1).all(|l| l.contains(",inconclusive,")));
}

#[test]
fn forecast_on_exponential_scores() {
    let dir = tempfile::tempdir().unwrap();
    // Exact Exp(1) quantiles, so the top of the file is log-linear.
    let m = 10_000;
    let scores: String = (1..=m).map(|i| format!("{}\n", -((i as f64) / (m as f64 + 1.0)).ln())).collect();
    let file = dir.path().join("exp.txt");
    std::fs::write(&file, scores).unwrap();
    let out = dir.path().join("fc");
    let o = tailcast(&["forecast", "--scores", path(&file), "--n-list", "1e6", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    // ln(1e6) up to the plotting-position offset ln((m+1)/m)
    assert!((row[3] - 1e6f64.ln()).abs() < 1e-3, "{}", row[3]);

    let few = dir.path().join("few.txt");
    std::fs::write(&few, "3\n2\n1\n").unwrap();
    assert_eq!(code(&tailcast(&["forecast", "--scores", path(&few), "--out", path(&out)])), 2);
}

#[test]
fn gumbel_probability_forecasts_report_both_scales() {
    let dir = tempfile::tempdir().unwrap();
    let m = 2000;
    let scores: String = (1..=m)
        .map(|i| {
            let psi = -((i as f64) / (m as f64 + 1.0)).ln();
            format!("{}\n", (-(-psi).exp()).exp())
        })
        .collect();
    let file = dir.path().join("p.txt");
    std::fs::write(&file, scores).unwrap();
    let o = tailcast(&["forecast", "--scores", path(&file), "--transform", "gumbel-prob", "--n-list", "1e4", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert!(csv.starts_with("n,depth,predicted_transformed,predicted_score,predicted_log_p\n"));
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((row[4] - row[3].ln()).abs() < 1e-12);
    assert!((row[4] + (-row[2]).exp()).abs() < 1e-15);
}

#[test]
fn manifest_reruns_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = tailcast(&["decompose", "--dist", "exp:rate=1;uniform:lo=0,hi=1", "--m", "500", "--n", "5000", "--trials", "2000", "--rank-trials", "5000", "--seed", "9", "--out", path(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=9") && manifest.contains("m=500") && manifest.contains("dist=exp:rate=1;uniform"));
    let b = dir.path().join("b");
    let o = tailcast(&["decompose", "--config", path(&a.join("manifest.txt")), "--out", path(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["decomposition.csv", "tail_slopes.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn score_file_decomposition_has_no_occupancy() {
    let dir = tempfile::tempdir().unwrap();
    let scores: String = (1..=20_000).map(|i| format!("{}\n", -((i as f64) / 20_001.0).ln())).collect();
    let file = dir.path().join("s.txt");
    std::fs::write(&file, scores).unwrap();
    let o = tailcast(&["decompose", "--scores", path(&file), "--m", "500", "--n", "5000", "--trials", "2000", "--rank-trials", "5000", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("decomposition.csv")).unwrap();
    let occ = csv.lines().find(|l| l.contains(",occupancy,")).unwrap();
    assert!(occ.contains(",occupancy,0,0,0"), "{occ}");
}

#[test]
fn coverage_reports_exact_and_simulated_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = tailcast(&["coverage", "--trials", "20000", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0][0], "exact");
    assert_eq!(rows[1][0], "simulated");
    let p: f64 = rows[0][1].parse().unwrap();
    assert!((p - 0.082).abs() < 1e-3);
    assert_eq!(rows[0][5], "200");
}

#[test]
fn gridworld_resume_and_seed_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(&cfg, TINY).unwrap();
    let pre = dir.path().join("pre");
    let ours = dir.path().join("ours");
    let c = path(&cfg);
    assert_eq!(code(&tailcast(&["gridworld", "pretrain", "--config", c, "--seed", "3", "--out", path(&pre)])), 0);
    let train = |extra: &[&str]| {
        let mut args = vec!["gridworld", "finetune", "--config", c, "--seed", "3", "--from", path(&pre), "--out", path(&ours)];
        args.extend_from_slice(extra);
        tailcast(&args)
    };
    assert_eq!(code(&train(&[])), 0);
    assert_eq!(code(&train(&["--resume"])), 0);
    let trace = std::fs::read_to_string(ours.join("trace.jsonl")).unwrap();
    let steps: Vec<u64> = trace
        .lines()
        .filter(|l| l.contains("\"kind\":\"step\""))
        .map(|l| {
            let tail = &l[l.find("\"step\":").unwrap() + 7..];
            tail[..tail.find(|c: char| !c.is_ascii_digit()).unwrap()].parse().unwrap()
        })
        .collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);

    let o = tailcast(&["gridworld", "finetune", "--config", c, "--seed", "4", "--from", path(&pre), "--out", path(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing"));

    let sft = dir.path().join("sft");
    assert_eq!(code(&tailcast(&["gridworld", "sft", "--config", c, "--seed", "3", "--from", path(&pre), "--out", path(&sft)])), 0);
    let eval = dir.path().join("eval");
    let o = tailcast(&["gridworld", "evaluate", "--config", c, "--seed", "3", "--from", path(&pre), "--sft", path(&sft), "--ours", path(&ours), "--out", path(&eval)]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(eval.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}
