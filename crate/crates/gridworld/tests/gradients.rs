use ndarray::{arr1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use tailcast::forecaster::{extrapolated_ranks, rank_weights, LossSpace, PlottingScheme, RankWeighting, ScoreTransform};
use tailcast_autodiff::{gradient_check, DetachedSelection, Graph, Tensor};
use tailcast_grid::loss::{fit_side_derivative, forecast_loss, log_positions, IogScope, LossConfig};
use tailcast_grid::policy::{bind, bind_frozen, mean_return, score_regrets};
use tailcast_grid::{init_params, policy_forward, regret, EnvParams, GridTask, NetConfig};

const M: usize = 96;
const N: usize = 1920;

fn top_desc(mut xs: Vec<f64>, count: usize) -> Tensor {
    xs.sort_by(|a, b| b.total_cmp(a));
    xs.truncate(count);
    arr1(&xs).into_dyn()
}

/// Top fit and deploy scores from Exp(1) plus a rare shifted component.
fn tail_sample(rng: &mut ChaCha8Rng, k: usize, ranks: usize) -> (Tensor, Tensor) {
    let e = Exp::new(1.0).unwrap();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| e.sample(rng) + if rng.random_bool(0.003) { 3.0 } else { 0.0 }).collect()
    };
    let fit = draw(M);
    let dep = draw(N);
    (top_desc(fit, k), top_desc(dep, ranks))
}

/// Probability-valued scores in (0, 1) for the GumbelProb transform.
fn prob_sample(rng: &mut ChaCha8Rng, k: usize, ranks: usize) -> (Tensor, Tensor) {
    let (f, d) = tail_sample(rng, k, ranks);
    let to_p = |x: f64| (-(-(x + 1.0)).exp()).exp();
    (f.mapv(to_p), d.mapv(to_p))
}

fn num_ranks() -> usize {
    extrapolated_ranks(M, N, PlottingScheme::Weibull).unwrap().len()
}

fn loss_value(fit: &Tensor, dep: &Tensor, cfg: &LossConfig) -> f64 {
    let g = Graph::new();
    forecast_loss(g.constant(fit.clone()), M, g.constant(dep.clone()), N, cfg).unwrap().loss.item().unwrap()
}

fn central(f: impl Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut p = x.clone();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    (up - f(&p)) / (2.0 * h)
}

fn configs() -> Vec<LossConfig> {
    let base = LossConfig { iog: IogScope::None, ..LossConfig::default() };
    vec![
        base,
        LossConfig { weighting: RankWeighting::RankUniform, ..base },
        LossConfig { scheme: PlottingScheme::Hazen, ..base },
        LossConfig { transform: ScoreTransform::GumbelProb, ..base },
        LossConfig { transform: ScoreTransform::GumbelProb, space: LossSpace::InverseTransformed, ..base },
    ]
}

#[test]
fn unmasked_forecast_loss_matches_finite_differences() {
    for cfg in configs() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ranks = extrapolated_ranks(M, N, cfg.scheme).unwrap().len();
            let (fit, dep) = if cfg.transform == ScoreTransform::Identity {
                tail_sample(&mut rng, cfg.k, ranks)
            } else {
                prob_sample(&mut rng, cfg.k, ranks)
            };
            // probabilities enter as x = exp(-exp(-z)) so the step is well scaled
            let gumbel = cfg.transform == ScoreTransform::GumbelProb;
            let lift = |t: Tensor| if gumbel { t.mapv(|x: f64| -(-x.ln()).ln()) } else { t };
            let r = gradient_check(
                |_, v| {
                    let (f, d) = if gumbel {
                        (v[0].neg().exp()?.neg().exp()?, v[1].neg().exp()?.neg().exp()?)
                    } else {
                        (v[0], v[1])
                    };
                    Ok(forecast_loss(f, M, d, N, &cfg).map_err(ad)?.loss)
                },
                &[lift(fit), lift(dep)],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{cfg:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn masked_gradients_are_the_masked_true_gradient() {
    let ranks = num_ranks();
    let cfg = LossConfig::default();
    let free = LossConfig { iog: IogScope::None, ..cfg };
    let mut masked_somewhere = (0, 0);
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (fit, dep) = tail_sample(&mut rng, cfg.k, ranks);
        let g = Graph::new();
        let (fv, dv) = (g.param(fit.clone()), g.param(dep.clone()));
        let fl = forecast_loss(fv, M, dv, N, &cfg).unwrap();
        assert_eq!(fl.loss.item().unwrap(), loss_value(&fit, &dep, &free));
        let grads = g.backward(fl.loss).unwrap();
        let (gf, gd) = (grads.wrt(fv), grads.wrt(dv));
        for i in 0..cfg.k {
            let fd = central(|x| loss_value(x, &dep, &free), &fit, i, 1e-7);
            if fl.fit_active[i] {
                assert!((gf[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-6), "fit {i}: {} vs {fd}", gf[i]);
            } else {
                assert_eq!(gf[i], 0.0);
                masked_somewhere.0 += 1;
            }
        }
        for j in 0..ranks {
            let fd = central(|x| loss_value(&fit, x, &free), &dep, j, 1e-7);
            if fl.deploy_active[j] {
                assert!((gd[j] - fd).abs() <= 1e-5 * fd.abs().max(1e-6), "deploy {j}: {} vs {fd}", gd[j]);
                assert!(fl.residuals[j] < 0.0);
            } else {
                assert_eq!(gd[j], 0.0);
                masked_somewhere.1 += 1;
            }
        }
    }
    assert!(masked_somewhere.0 > 0 && masked_somewhere.1 > 0, "{masked_somewhere:?}");
}

#[test]
fn masks_never_change_the_forward_value() {
    let ranks = num_ranks();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fit, dep) = tail_sample(&mut rng, 10, ranks);
        let values: Vec<f64> = [IogScope::None, IogScope::FitOnly, IogScope::DeployOnly, IogScope::Both]
            .into_iter()
            .map(|iog| loss_value(&fit, &dep, &LossConfig { iog, ..LossConfig::default() }))
            .collect();
        assert!(values.windows(2).all(|w| w[0] == w[1]), "{values:?}");
    }
}

fn closed_form_case(k: usize, transform: ScoreTransform, space: LossSpace, seed: u64) {
    let cfg = LossConfig { k, transform, space, iog: IogScope::None, ..LossConfig::default() };
    let ranks = extrapolated_ranks(M, N, cfg.scheme).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fit, dep) = if transform == ScoreTransform::Identity {
        tail_sample(&mut rng, k, ranks.len())
    } else {
        prob_sample(&mut rng, k, ranks.len())
    };
    let psi: Vec<f64> = fit.iter().map(|&x| transform.forward(x).unwrap()).collect();
    let g = Graph::new();
    let fl = forecast_loss(g.constant(fit.clone()), M, g.constant(dep.clone()), N, &cfg).unwrap();
    let g_prime: Vec<f64> = fl
        .predicted
        .iter()
        .map(|&q| if space == LossSpace::InverseTransformed { transform.to_loss_space_deriv(q) } else { 1.0 })
        .collect();
    let weights = rank_weights(&ranks, cfg.weighting).unwrap();
    let closed = fit_side_derivative(
        &psi,
        &log_positions(cfg.scheme, k, M),
        &log_positions(cfg.scheme, ranks.len(), N),
        &fl.residuals,
        &weights,
        &g_prime,
    )
    .unwrap();
    for i in 0..k {
        let h = 1e-6 * fit[i].abs().max(1e-3);
        let dx = central(|x| loss_value(x, &dep, &cfg), &fit, i, h);
        // chain rule back to the transformed coordinate
        let dpsi_dx = match transform {
            ScoreTransform::Identity => 1.0,
            ScoreTransform::GumbelProb => -1.0 / (fit[i] * fit[i].ln()),
        };
        let fd = dx / dpsi_dx;
        assert!((closed[i] - fd).abs() <= 1e-6 * closed[i].abs().max(fd.abs()).max(1e-8), "k={k} i={i}: {} vs {fd}", closed[i]);
    }
}

#[test]
fn fit_side_closed_form_matches_finite_differences() {
    for seed in 0..3 {
        closed_form_case(10, ScoreTransform::Identity, LossSpace::TransformedScore, seed);
        closed_form_case(2, ScoreTransform::Identity, LossSpace::TransformedScore, seed);
        closed_form_case(10, ScoreTransform::GumbelProb, LossSpace::InverseTransformed, seed);
    }
}

#[test]
fn detached_selection_routes_gradient_to_chosen_entries_only() {
    let ranks = num_ranks();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = Exp::new(1.0).unwrap();
    let fit_pool: Vec<f64> = (0..M).map(|_| e.sample(&mut rng)).collect();
    let dep_pool: Vec<f64> = (0..N).map(|_| e.sample(&mut rng)).collect();
    let cfg = LossConfig { iog: IogScope::None, ..LossConfig::default() };
    let fs = DetachedSelection::top(&fit_pool, cfg.k);
    let ds = DetachedSelection::top(&dep_pool, ranks);

    let g = Graph::new();
    let (fp, dp) = (g.param(arr1(&fit_pool).into_dyn()), g.param(arr1(&dep_pool).into_dyn()));
    let fl = forecast_loss(fs.gather(fp).unwrap(), M, ds.gather(dp).unwrap(), N, &cfg).unwrap();
    let grads = g.backward(fl.loss).unwrap();
    let (gf, gd) = (grads.wrt(fp), grads.wrt(dp));

    let g2 = Graph::new();
    let fit = top_desc(fit_pool.clone(), cfg.k);
    let dep = top_desc(dep_pool.clone(), ranks);
    let (fv, dv) = (g2.param(fit), g2.param(dep));
    let direct = forecast_loss(fv, M, dv, N, &cfg).unwrap();
    assert_eq!(direct.loss.item().unwrap(), fl.loss.item().unwrap());
    let grads2 = g2.backward(direct.loss).unwrap();
    let (hf, hd) = (grads2.wrt(fv), grads2.wrt(dv));

    for (i, &p) in fs.indices.iter().enumerate() {
        assert_eq!(gf[p], hf[i]);
    }
    for (j, &p) in ds.indices.iter().enumerate() {
        assert_eq!(gd[p], hd[j]);
    }
    let chosen_f: std::collections::HashSet<_> = fs.indices.iter().collect();
    let chosen_d: std::collections::HashSet<_> = ds.indices.iter().collect();
    assert!((0..M).filter(|i| !chosen_f.contains(i)).all(|i| gf[i] == 0.0));
    assert!((0..N).filter(|i| !chosen_d.contains(i)).all(|i| gd[i] == 0.0));
}

fn small_task(rng: &mut ChaCha8Rng) -> GridTask {
    let start = rng.random_range(0..16);
    let goal = loop {
        let g = rng.random_range(0..16);
        if g != start {
            break g;
        }
    };
    let mut t = GridTask::open(4, 4, start, goal);
    for c in 0..16 {
        if c != start && c != goal {
            t.traps[c] = rng.random_bool(0.2);
        }
    }
    t
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_net() -> (NetConfig, EnvParams) {
    (NetConfig { width: 4, height: 4, horizon: 4, channels: 4, embed: 4 }, EnvParams { horizon: 4, ..EnvParams::default() })
}

/// Initial parameters with a head large enough for a non-uniform policy.
fn lively_params(net: &NetConfig, rng: &mut ChaCha8Rng) -> tailcast_autodiff::ParamSet {
    let mut p = init_params(net, rng);
    for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
        if name == "head.w" {
            t.mapv_inplace(|x| x * 100.0);
        }
    }
    p
}

fn ad(e: tailcast_grid::GridError) -> tailcast_autodiff::AdError {
    tailcast_autodiff::AdError::Domain(e.to_string())
}

#[test]
fn regret_gradient_wrt_logits() {
    let env = EnvParams { horizon: 5, ..EnvParams::default() };
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<GridTask> = (0..10).map(|_| small_task(&mut rng)).collect();
        let refs: Vec<&GridTask> = tasks.iter().collect();
        let logits = random_tensor(&mut rng, &[10, 5, 16, 4], 2.0);
        // central-difference roundoff at this step is ~2e-11 absolute, hence the floor
        let r = gradient_check(|_, v| Ok(regret(&refs, &env, v[0]).map_err(ad)?.sum()), &[logits], 1e-4, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn regret_gradient_through_the_policy_network() {
    let (net, env) = small_net();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let tasks: Vec<GridTask> = (0..10).map(|_| small_task(&mut rng)).collect();
        let refs: Vec<&GridTask> = tasks.iter().collect();
        let params = lively_params(&net, &mut rng);
        let r = gradient_check(
            |_, v| {
                let logits = policy_forward(&net, v, &refs).map_err(ad)?;
                Ok(regret(&refs, &env, logits).map_err(ad)?.sum())
            },
            &params.tensors,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn regularized_total_gradient_through_the_policy_network() {
    let (net, env) = small_net();
    let (m, n, lambda) = (10, 30, 1.5);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
        let pool: Vec<GridTask> = (0..m + n).map(|_| small_task(&mut rng)).collect();
        let held_in: Vec<GridTask> = (0..8).map(|_| small_task(&mut rng)).collect();
        let refs: Vec<&GridTask> = pool.iter().collect();
        let held: Vec<&GridTask> = held_in.iter().collect();
        let params = lively_params(&net, &mut rng);
        let cfg = LossConfig { k: 4, iog: IogScope::None, ..LossConfig::default() };
        let ranks = extrapolated_ranks(m, n, cfg.scheme).unwrap().len();
        let scores = score_regrets(&net, &params, &env, &refs).unwrap();
        let fit_sel = DetachedSelection::top(&scores[..m], cfg.k);
        let dep_sel = DetachedSelection {
            indices: DetachedSelection::top(&scores[m..], ranks).indices.iter().map(|i| i + m).collect(),
        };
        let r = gradient_check(
            |_, v| {
                let logits = policy_forward(&net, v, &refs).map_err(ad)?;
                let reg = regret(&refs, &env, logits).map_err(ad)?;
                let fl = forecast_loss(fit_sel.gather(reg)?, m, dep_sel.gather(reg)?, n, &cfg).map_err(ad)?;
                let ret = mean_return(&net, v, &env, &held).map_err(ad)?;
                fl.loss.sub(ret.scale(lambda))
            },
            &params.tensors,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");

        let g = Graph::new();
        let frozen = bind_frozen(&g, &params);
        let live = bind(&g, &params);
        let a = policy_forward(&net, &frozen, &refs).unwrap().value();
        let b = policy_forward(&net, &live, &refs).unwrap().value();
        assert_eq!(*a, *b);
    }
}
