//! Deterministic finite-horizon gridworld with exact backward induction.

use std::collections::VecDeque;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use tailcast_autodiff::{Tensor, Var, PAD};

use crate::error::{GridError, Result};

pub const ACTIONS: usize = 4;

/// Row/column offsets for up, down, left, right.
const MOVES: [(isize, isize); ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Severity {
    Bulk,
    Rare,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Bulk => "bulk",
            Severity::Rare => "rare",
        })
    }
}

impl FromStr for Severity {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bulk" => Ok(Severity::Bulk),
            "rare" => Ok(Severity::Rare),
            o => Err(GridError::Parse(format!("unknown severity `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvParams {
    pub horizon: usize,
    pub gamma: f64,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub trap_penalty: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams { horizon: 10, gamma: 1.0, step_cost: -0.01, goal_reward: 1.0, trap_penalty: -1.0 }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(GridError::InvalidParameter(format!(
                "horizon {} and gamma {} must satisfy horizon >= 1, gamma in (0, 1]",
                self.horizon, self.gamma
            )));
        }
        Ok(())
    }
}

/// Layout generation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutParams {
    pub width: usize,
    pub height: usize,
    pub min_distance: usize,
    pub trap_density: f64,
    pub max_attempts: usize,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams { width: 8, height: 8, min_distance: 5, trap_density: 0.75, max_attempts: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridTask {
    pub width: usize,
    pub height: usize,
    pub start: usize,
    pub goal: usize,
    pub traps: Vec<bool>,
    pub severity: Severity,
}

impl GridTask {
    /// A trap-free task.
    pub fn open(width: usize, height: usize, start: usize, goal: usize) -> Self {
        GridTask { width, height, start, goal, traps: vec![false; width * height], severity: Severity::Bulk }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    pub fn trap_count(&self) -> usize {
        self.traps.iter().filter(|&&t| t).count()
    }

    pub fn is_absorbing(&self, cell: usize) -> bool {
        cell == self.goal || self.traps[cell]
    }

    /// Cell reached by `action`; off-grid moves stay put.
    pub fn step(&self, cell: usize, action: usize) -> usize {
        let (r, c) = self.row_col(cell);
        let (dr, dc) = MOVES[action];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            cell
        } else {
            nr as usize * self.width + nc as usize
        }
    }

    pub fn reward(&self, env: &EnvParams, cell: usize, action: usize) -> f64 {
        let next = self.step(cell, action);
        let mut r = env.step_cost;
        if next != cell {
            if next == self.goal {
                r += env.goal_reward;
            } else if self.traps[next] {
                r += env.trap_penalty;
            }
        }
        r
    }

    /// Shortest trap-free path length from start to goal.
    pub fn goal_distance(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.cells()];
        let mut queue = VecDeque::from([self.start]);
        dist[self.start] = 0;
        while let Some(s) = queue.pop_front() {
            if s == self.goal {
                return Some(dist[s]);
            }
            for a in 0..ACTIONS {
                let n = self.step(s, a);
                if dist[n] == usize::MAX && !self.traps[n] {
                    dist[n] = dist[s] + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.cells();
        if c == 0 || self.traps.len() != c || self.start >= c || self.goal >= c {
            return Err(GridError::InvalidParameter("task cells out of range".into()));
        }
        if self.start == self.goal || self.traps[self.start] || self.traps[self.goal] {
            return Err(GridError::InvalidParameter("start/goal overlap each other or a trap".into()));
        }
        if self.severity == Severity::Bulk && self.trap_count() > 0 {
            return Err(GridError::InvalidParameter("bulk task with traps".into()));
        }
        Ok(())
    }

    /// Line record: `width height start goal traps-hex severity`.
    pub fn to_record(&self) -> String {
        let mut bytes = vec![0u8; self.cells().div_ceil(8)];
        for (i, _) in self.traps.iter().enumerate().filter(|(_, &t)| t) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        format!("{} {} {} {} {} {}", self.width, self.height, self.start, self.goal, hex, self.severity)
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(GridError::Parse(format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| GridError::Parse(format!("`{s}`: {e}")));
        let (width, height, start, goal) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
        let cells = width * height;
        if f[4].len() != 2 * cells.div_ceil(8) {
            return Err(GridError::Parse(format!("trap mask `{}` has the wrong length", f[4])));
        }
        let mut traps = vec![false; cells];
        for (i, chunk) in f[4].as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|e| GridError::Parse(e.to_string()))?;
            let byte = u8::from_str_radix(s, 16).map_err(|e| GridError::Parse(format!("`{s}`: {e}")))?;
            for bit in 0..8 {
                let cell = i * 8 + bit;
                if byte & (1 << bit) != 0 {
                    if cell >= cells {
                        return Err(GridError::Parse("trap bit beyond the grid".into()));
                    }
                    traps[cell] = true;
                }
            }
        }
        let task = GridTask { width, height, start, goal, traps, severity: f[5].parse()? };
        task.validate()?;
        Ok(task)
    }
}

/// Draws one layout. Rare layouts are rejected until the goal is reachable
/// within the horizon; only those rejections count against `max_attempts`.
pub fn generate_task<R: Rng + ?Sized>(
    layout: &LayoutParams,
    env: &EnvParams,
    severity: Severity,
    rng: &mut R,
) -> Result<GridTask> {
    let (w, h) = (layout.width, layout.height);
    if w * h < 2 || w + h < layout.min_distance + 2 {
        return Err(GridError::InvalidParameter(format!(
            "a {w}x{h} grid cannot hold start and goal {} apart",
            layout.min_distance
        )));
    }
    if !(0.0..=1.0).contains(&layout.trap_density) {
        return Err(GridError::InvalidParameter(format!("trap density {}", layout.trap_density)));
    }
    let cells = w * h;
    let mut rejected = 0;
    while rejected < layout.max_attempts {
        let start = rng.random_range(0..cells);
        let goal = rng.random_range(0..cells);
        let mut task = GridTask::open(w, h, start, goal);
        if start == goal || task.manhattan(start, goal) < layout.min_distance {
            continue;
        }
        task.severity = severity;
        if severity == Severity::Rare {
            for c in 0..cells {
                if c != start && c != goal {
                    task.traps[c] = rng.random_bool(layout.trap_density);
                }
            }
            match task.goal_distance() {
                Some(d) if d <= env.horizon => {}
                _ => {
                    rejected += 1;
                    continue;
                }
            }
        }
        return Ok(task);
    }
    Err(GridError::RejectionExhausted(layout.max_attempts))
}

/// Exact `V(cell, t)` for `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub cells: usize,
    pub horizon: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn get(&self, cell: usize, t: usize) -> f64 {
        self.values[t * self.cells + cell]
    }

    pub fn level(&self, t: usize) -> &[f64] {
        &self.values[t * self.cells..(t + 1) * self.cells]
    }
}

/// Optimal values by backward induction. Goal and trap cells are absorbing
/// with value zero; their reward is paid on entry.
pub fn optimal_values(task: &GridTask, env: &EnvParams) -> ValueTable {
    let cells = task.cells();
    let t_max = env.horizon;
    let mut values = vec![0.0; (t_max + 1) * cells];
    for t in (0..t_max).rev() {
        for s in 0..cells {
            if task.is_absorbing(s) {
                continue;
            }
            let best = (0..ACTIONS)
                .map(|a| {
                    let n = task.step(s, a);
                    task.reward(env, s, a) + env.gamma * values[(t + 1) * cells + n]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            values[t * cells + s] = best;
        }
    }
    ValueTable { cells, horizon: t_max, values }
}

/// Constant per-batch transition data for differentiable value iteration.
struct BatchDynamics {
    reward: Tensor,
    next: Rc<Vec<usize>>,
    alive: Tensor,
}

fn batch_dynamics(tasks: &[&GridTask], env: &EnvParams) -> Result<BatchDynamics> {
    let first = tasks.first().ok_or_else(|| GridError::InvalidParameter("empty task batch".into()))?;
    let cells = first.cells();
    let b = tasks.len();
    let mut reward = Vec::with_capacity(b * cells * ACTIONS);
    let mut next = Vec::with_capacity(b * cells * ACTIONS);
    let mut alive = Vec::with_capacity(b * cells);
    for (i, task) in tasks.iter().enumerate() {
        if task.cells() != cells || task.width != first.width {
            return Err(GridError::ShapeMismatch("tasks in a batch must share grid size".into()));
        }
        for s in 0..cells {
            alive.push(if task.is_absorbing(s) { 0.0 } else { 1.0 });
            for a in 0..ACTIONS {
                let n = task.step(s, a);
                reward.push(task.reward(env, s, a));
                next.push(if task.is_absorbing(n) { PAD } else { i * cells + n });
            }
        }
    }
    Ok(BatchDynamics {
        reward: ArrayD::from_shape_vec(IxDyn(&[b, cells, ACTIONS]), reward).expect("sized"),
        next: Rc::new(next),
        alive: ArrayD::from_shape_vec(IxDyn(&[b, cells]), alive).expect("sized"),
    })
}

/// Values of the softmax policy given `logits` of shape
/// `(batch, horizon, cells, 4)`. Returns one `(batch, cells)` node per
/// timestep `0..=horizon`.
pub fn policy_values<'g>(tasks: &[&GridTask], env: &EnvParams, logits: Var<'g>) -> Result<Vec<Var<'g>>> {
    env.validate()?;
    let dynamics = batch_dynamics(tasks, env)?;
    let (b, cells, t_max) = (tasks.len(), tasks[0].cells(), env.horizon);
    let expected = [b, t_max, cells, ACTIONS];
    if logits.shape() != expected {
        return Err(GridError::ShapeMismatch(format!("logits {:?}, expected {expected:?}", logits.shape())));
    }
    let g = logits.graph();
    let probs = logits.softmax(3)?;
    let reward = g.constant(dynamics.reward);
    let alive = g.constant(dynamics.alive);
    let mut levels = vec![g.constant(ArrayD::zeros(IxDyn(&[b, cells])))];
    for t in (0..t_max).rev() {
        let after = levels.last().expect("terminal level");
        let cont = after.gather(Rc::clone(&dynamics.next), &[b, cells, ACTIONS])?;
        let q = reward.add(cont.scale(env.gamma))?;
        let v = probs.select(1, t)?.mul(q)?.sum_axis(2)?.mul(alive)?;
        levels.push(v);
    }
    levels.reverse();
    Ok(levels)
}

/// `V(start, 0)` per task, from the levels of [`policy_values`].
pub fn start_values<'g>(tasks: &[&GridTask], level0: Var<'g>) -> Result<Var<'g>> {
    let start: Vec<usize> = tasks.iter().enumerate().map(|(i, t)| i * t.cells() + t.start).collect();
    Ok(level0.gather(Rc::new(start), &[tasks.len()])?)
}

/// Per-task regret `V*(start, 0) - V^pi(start, 0)`, shape `(batch,)`.
pub fn regret<'g>(tasks: &[&GridTask], env: &EnvParams, logits: Var<'g>) -> Result<Var<'g>> {
    let levels = policy_values(tasks, env, logits)?;
    let v_pi = start_values(tasks, levels[0])?;
    let best: Vec<f64> = tasks.iter().map(|t| optimal_values(t, env).get(t.start, 0)).collect();
    let best = logits.graph().constant(ArrayD::from_shape_vec(IxDyn(&[tasks.len()]), best).expect("sized"));
    Ok(best.sub(v_pi)?)
}
