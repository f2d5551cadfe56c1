//! Task-conditioned convolutional policy producing logits for every
//! (timestep, cell, action).

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use tailcast_autodiff::{AdamW, Graph, ParamSet, Tensor, Var, PAD};

use crate::env::{policy_values, regret, start_values, EnvParams, GridTask, ACTIONS};
use crate::error::{GridError, Result};

/// Input channels: ones, row, column, trap, goal, start, and the signed row
/// and column offsets to the goal.
pub const INPUT_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub channels: usize,
    pub embed: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { width: 8, height: 8, horizon: 10, channels: 32, embed: 64 }
    }
}

impl NetConfig {
    fn cells(&self) -> usize {
        self.width * self.height
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, k, e) = (self.cells(), self.channels, self.embed);
        vec![
            ("embed.w", vec![c * INPUT_CHANNELS, e]),
            ("embed.b", vec![e]),
            ("conv1.w", vec![9 * INPUT_CHANNELS, k]),
            ("conv1.b", vec![k]),
            ("film1.w", vec![e, k]),
            ("conv2.w", vec![9 * k, k]),
            ("conv2.b", vec![k]),
            ("film2.w", vec![e, k]),
            ("head.w", vec![k, self.horizon * ACTIONS]),
            ("head.b", vec![self.horizon * ACTIONS]),
        ]
    }
}

/// Fresh parameters: scaled normal weights, zero biases, and a small head so
/// the initial policy is close to uniform.
pub fn init_params<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, shape) in cfg.shapes() {
        let t = if name.ends_with(".b") {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            let fan_in = shape[0] as f64;
            let sd = if name == "head.w" { 0.01 } else { (2.0 / fan_in).sqrt() };
            let normal = Normal::new(0.0, sd).expect("positive sd");
            let n: usize = shape.iter().product();
            ArrayD::from_shape_vec(IxDyn(&shape), (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
        };
        set.push(name, t);
    }
    set
}

/// Checks that `params` has the layout expected by `cfg`.
pub fn check_params(cfg: &NetConfig, params: &ParamSet) -> Result<()> {
    let shapes = cfg.shapes();
    if params.len() != shapes.len() {
        return Err(GridError::ShapeMismatch(format!("{} tensors, expected {}", params.len(), shapes.len())));
    }
    for ((name, shape), (n, t)) in shapes.iter().zip(params.names.iter().zip(&params.tensors)) {
        if name != n || t.shape() != shape.as_slice() {
            return Err(GridError::ShapeMismatch(format!("parameter {n} {:?}, expected {name} {shape:?}", t.shape())));
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(GridError::InvalidParameter(format!("parameter {n} is not finite")));
        }
    }
    Ok(())
}

fn features(cfg: &NetConfig, task: &GridTask) -> Vec<[f64; INPUT_CHANNELS]> {
    let rs = (cfg.height.max(2) - 1) as f64;
    let cs = (cfg.width.max(2) - 1) as f64;
    (0..cfg.cells())
        .map(|s| {
            let (r, c) = task.row_col(s);
            let (gr, gc) = task.row_col(task.goal);
            let flag = |b: bool| if b { 1.0 } else { 0.0 };
            [
                1.0,
                r as f64 / rs,
                c as f64 / cs,
                flag(task.traps[s]),
                flag(s == task.goal),
                flag(s == task.start),
                (gr as f64 - r as f64) / rs,
                (gc as f64 - c as f64) / cs,
            ]
        })
        .collect()
}

/// `neighbours[s][o]` for the 3x3 stencil, `None` off the grid.
fn neighbours(cfg: &NetConfig) -> Vec<[Option<usize>; 9]> {
    let (w, h) = (cfg.width as isize, cfg.height as isize);
    (0..cfg.cells())
        .map(|s| {
            let (r, c) = ((s as isize) / w, (s as isize) % w);
            let mut out = [None; 9];
            for (o, slot) in out.iter_mut().enumerate() {
                let (nr, nc) = (r + o as isize / 3 - 1, c + o as isize % 3 - 1);
                if nr >= 0 && nc >= 0 && nr < h && nc < w {
                    *slot = Some((nr * w + nc) as usize);
                }
            }
            out
        })
        .collect()
}

/// Logits of shape `(batch, horizon, cells, 4)`. `vars` are the graph leaves
/// bound to the parameters, in [`ParamSet`] order.
pub fn policy_forward<'g>(cfg: &NetConfig, vars: &[Var<'g>], tasks: &[&GridTask]) -> Result<Var<'g>> {
    if vars.len() != cfg.shapes().len() {
        return Err(GridError::ShapeMismatch(format!("{} parameter leaves", vars.len())));
    }
    if tasks.iter().any(|t| t.width != cfg.width || t.height != cfg.height) {
        return Err(GridError::ShapeMismatch("task grid differs from the network's".into()));
    }
    let g = vars[0].graph();
    let (b, c, k, t_max) = (tasks.len(), cfg.cells(), cfg.channels, cfg.horizon);
    let nb = neighbours(cfg);
    let feats: Vec<_> = tasks.iter().map(|t| features(cfg, t)).collect();

    let mut flat = Vec::with_capacity(b * c * INPUT_CHANNELS);
    let mut cols = Vec::with_capacity(b * c * 9 * INPUT_CHANNELS);
    for f in &feats {
        for (s, cell) in f.iter().enumerate() {
            flat.extend_from_slice(cell);
            for o in nb[s] {
                match o {
                    Some(n) => cols.extend_from_slice(&f[n]),
                    None => cols.extend_from_slice(&[0.0; INPUT_CHANNELS]),
                }
            }
        }
    }
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[b, c * INPUT_CHANNELS]), flat).expect("sized"));
    let x_cols = g.constant(ArrayD::from_shape_vec(IxDyn(&[b * c, 9 * INPUT_CHANNELS]), cols).expect("sized"));

    let embed = x.affine(vars[0], vars[1])?.tanh();
    let spread: Rc<Vec<usize>> = Rc::new((0..b * c).flat_map(|row| (0..k).map(move |ch| (row / c) * k + ch)).collect());

    let film1 = embed.matmul(vars[4])?.gather(Rc::clone(&spread), &[b * c, k])?;
    let h1 = x_cols.affine(vars[2], vars[3])?.add(film1)?.relu();

    let mut idx = Vec::with_capacity(b * c * 9 * k);
    for bi in 0..b {
        for s in 0..c {
            for o in nb[s] {
                match o {
                    Some(n) => idx.extend(((bi * c + n) * k)..((bi * c + n + 1) * k)),
                    None => idx.extend(std::iter::repeat_n(PAD, k)),
                }
            }
        }
    }
    let h1_cols = h1.gather(Rc::new(idx), &[b * c, 9 * k])?;
    let film2 = embed.matmul(vars[7])?.gather(spread, &[b * c, k])?;
    let h2 = h1_cols.affine(vars[5], vars[6])?.add(film2)?.relu();

    let head = h2.affine(vars[8], vars[9])?;
    let mut perm = Vec::with_capacity(b * t_max * c * ACTIONS);
    for bi in 0..b {
        for t in 0..t_max {
            for s in 0..c {
                for a in 0..ACTIONS {
                    perm.push((bi * c + s) * t_max * ACTIONS + t * ACTIONS + a);
                }
            }
        }
    }
    Ok(head.gather(Rc::new(perm), &[b, t_max, c, ACTIONS])?)
}

/// Binds parameters as trainable leaves.
pub fn bind<'g>(g: &'g Graph, params: &ParamSet) -> Vec<Var<'g>> {
    params.tensors.iter().map(|t| g.param(t.clone())).collect()
}

/// Binds parameters as constants.
pub fn bind_frozen<'g>(g: &'g Graph, params: &ParamSet) -> Vec<Var<'g>> {
    params.tensors.iter().map(|t| g.constant(t.clone())).collect()
}

/// Tasks scored per gradient-free forward pass.
pub const SCORE_CHUNK: usize = 128;

/// Gradient-free regrets of `tasks`.
pub fn score_regrets(cfg: &NetConfig, params: &ParamSet, env: &EnvParams, tasks: &[&GridTask]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(SCORE_CHUNK) {
        let g = Graph::new();
        let vars = bind_frozen(&g, params);
        let logits = policy_forward(cfg, &vars, chunk)?;
        out.extend(regret(chunk, env, logits)?.value().iter().copied());
    }
    Ok(out)
}

/// Gradient-free returns `V^pi(start, 0)` of `tasks`.
pub fn score_returns(cfg: &NetConfig, params: &ParamSet, env: &EnvParams, tasks: &[&GridTask]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(SCORE_CHUNK) {
        let g = Graph::new();
        let vars = bind_frozen(&g, params);
        let logits = policy_forward(cfg, &vars, chunk)?;
        let levels = policy_values(chunk, env, logits)?;
        out.extend(start_values(chunk, levels[0])?.value().iter().copied());
    }
    Ok(out)
}

/// Mean `V^pi(start, 0)` over `tasks` as a graph node.
pub fn mean_return<'g>(cfg: &NetConfig, vars: &[Var<'g>], env: &EnvParams, tasks: &[&GridTask]) -> Result<Var<'g>> {
    let logits = policy_forward(cfg, vars, tasks)?;
    let levels = policy_values(tasks, env, logits)?;
    Ok(start_values(tasks, levels[0])?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 500, batch: 16, lr: 1e-4, clip: 1.0, weight_decay: 0.0 }
    }
}

/// Return maximisation on random batches. Returns the mean batch return
/// before each step.
pub fn pretrain<R: Rng + ?Sized>(
    cfg: &NetConfig,
    params: &mut ParamSet,
    env: &EnvParams,
    tasks: &[GridTask],
    pc: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(GridError::InvalidParameter("pretraining needs at least one task".into()));
    }
    check_params(cfg, params)?;
    let mut opt = AdamW::new(pc.lr).with_weight_decay(pc.weight_decay).with_clip(pc.clip);
    let mut trace = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch: Vec<&GridTask> =
            rand::seq::index::sample(rng, tasks.len(), pc.batch.min(tasks.len())).into_iter().map(|i| &tasks[i]).collect();
        let g = Graph::new();
        let vars = bind(&g, params);
        let ret = mean_return(cfg, &vars, env, &batch)?;
        let value = ret.item()?;
        if !value.is_finite() {
            return Err(GridError::Divergence { step });
        }
        trace.push(value);
        let grads = g.backward(ret.neg())?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        opt.step(&mut params.tensors, &grads).map_err(|_| GridError::Divergence { step })?;
    }
    Ok(trace)
}
