//! Task banks and their per-seed splits.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use tailcast::rng::{derive_seed, stream};

use crate::env::{generate_task, EnvParams, GridTask, LayoutParams, Severity};
use crate::error::{GridError, Result};

/// Rare fraction of the reference bank, 80 / 52,000.
pub const DEFAULT_RARE_FRACTION: f64 = 80.0 / 52_000.0;

/// Redraws allowed when a rare layout exhausts its rejection budget.
const TASK_RETRIES: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBank {
    pub tasks: Vec<GridTask>,
    pub mix_ratio: f64,
    pub seed: u64,
}

impl TaskBank {
    pub fn rare_count(&self) -> usize {
        self.tasks.iter().filter(|t| t.severity == Severity::Rare).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# seed={} size={} eps={}", self.seed, self.tasks.len(), self.mix_ratio)?;
        for t in &self.tasks {
            writeln!(f, "{}", t.to_record())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| GridError::Parse("empty bank file".into()))??;
        let mut seed = None;
        let mut eps = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("eps", v)) => eps = v.parse().ok(),
                _ => {}
            }
        }
        let (seed, mix_ratio) = match (seed, eps) {
            (Some(s), Some(e)) => (s, e),
            _ => return Err(GridError::Parse(format!("bad bank header `{header}`"))),
        };
        let mut tasks = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                tasks.push(GridTask::from_record(&line)?);
            }
        }
        Ok(TaskBank { tasks, mix_ratio, seed })
    }
}

/// Number of distinct trap-free layouts.
pub fn distinct_bulk_layouts(layout: &LayoutParams) -> usize {
    let probe = GridTask::open(layout.width, layout.height, 0, 0);
    let c = probe.cells();
    (0..c).flat_map(|s| (0..c).map(move |g| (s, g))).filter(|&(s, g)| s != g && probe.manhattan(s, g) >= layout.min_distance).count()
}

/// A bank of `size` tasks with `round(size * eps)` rare layouts, shuffled.
/// Task `i` draws from its own stream. Rare layouts are always distinct;
/// bulk layouts are distinct whenever enough of them exist.
pub fn generate_bank(seed: u64, size: usize, eps: f64, layout: &LayoutParams, env: &EnvParams) -> Result<TaskBank> {
    if size == 0 || !(0.0..=1.0).contains(&eps) {
        return Err(GridError::InvalidParameter(format!("bank size {size}, eps {eps}")));
    }
    let rare = (size as f64 * eps).round() as usize;
    let bulk = size - rare;
    let dedup_bulk = bulk <= distinct_bulk_layouts(layout);
    let task_seed = derive_seed(seed, "bank-task");
    let mut seen = HashSet::with_capacity(size);
    let mut tasks = Vec::with_capacity(size);
    for i in 0..size {
        let severity = if i < rare { Severity::Rare } else { Severity::Bulk };
        let dedup = severity == Severity::Rare || dedup_bulk;
        let mut rng = stream(task_seed, i as u64);
        let mut retries = 0;
        let task = loop {
            match generate_task(layout, env, severity, &mut rng) {
                Ok(t) if !dedup || !seen.contains(&t) => break t,
                Ok(_) => {}
                Err(GridError::RejectionExhausted(n)) => {
                    retries += 1;
                    if retries > TASK_RETRIES {
                        return Err(GridError::RejectionExhausted(n));
                    }
                }
                Err(e) => return Err(e),
            }
        };
        if dedup {
            seen.insert(task.clone());
        }
        tasks.push(task);
    }
    tasks.shuffle(&mut stream(derive_seed(seed, "bank-order"), 0));
    Ok(TaskBank { tasks, mix_ratio: eps, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub fit: usize,
    pub deploy: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { pretrain: 192, train_pairs: 20, held_out_pairs: 5, fit: 96, deploy: 1920 }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.pretrain + (self.train_pairs + self.held_out_pairs) * (self.fit + self.deploy)
    }
}

/// A (fit, deploy) pair of bank indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolPair {
    pub fit: Vec<usize>,
    pub deploy: Vec<usize>,
}

impl PoolPair {
    /// Fit then deploy indices.
    pub fn union(&self) -> Vec<usize> {
        self.fit.iter().chain(&self.deploy).copied().collect()
    }
}

/// Disjoint splits of one bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub pretrain: Vec<usize>,
    pub train: Vec<PoolPair>,
    pub held_out: Vec<PoolPair>,
}

/// Draws all splits without replacement from a shuffled index order.
pub fn split_bank(bank: &TaskBank, sizes: &SplitSizes) -> Result<Splits> {
    if sizes.fit == 0 || sizes.deploy == 0 {
        return Err(GridError::InvalidParameter("fit and deploy sizes must be positive".into()));
    }
    if sizes.total() > bank.tasks.len() {
        return Err(GridError::InvalidParameter(format!(
            "splits need {} tasks, bank has {}",
            sizes.total(),
            bank.tasks.len()
        )));
    }
    let mut order: Vec<usize> = (0..bank.tasks.len()).collect();
    order.shuffle(&mut stream(derive_seed(bank.seed, "splits"), 0));
    let mut cursor = order.into_iter();
    let mut take = |n: usize| -> Vec<usize> { cursor.by_ref().take(n).collect() };
    let pretrain = take(sizes.pretrain);
    let mut pair = || PoolPair { fit: take(sizes.fit), deploy: take(sizes.deploy) };
    let train = (0..sizes.train_pairs).map(|_| pair()).collect();
    let held_out = (0..sizes.held_out_pairs).map(|_| pair()).collect();
    Ok(Splits { pretrain, train, held_out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rare_count_is_rounded_fraction() {
        let bank = generate_bank(7, 5200, DEFAULT_RARE_FRACTION, &LayoutParams::default(), &EnvParams::default()).unwrap();
        assert_eq!(bank.rare_count(), 8);
        let none = generate_bank(7, 300, 0.0, &LayoutParams::default(), &EnvParams::default()).unwrap();
        assert_eq!(none.rare_count(), 0);
    }

    #[test]
    fn small_banks_are_distinct() {
        let bank = generate_bank(9, 1000, 0.05, &LayoutParams::default(), &EnvParams::default()).unwrap();
        let set: HashSet<_> = bank.tasks.iter().collect();
        assert_eq!(set.len(), 1000);
    }

    #[test]
    fn splits_are_disjoint() {
        let bank = generate_bank(3, 3000, 0.01, &LayoutParams::default(), &EnvParams::default()).unwrap();
        let sizes = SplitSizes { pretrain: 50, train_pairs: 3, held_out_pairs: 2, fit: 20, deploy: 400 };
        let s = split_bank(&bank, &sizes).unwrap();
        let mut all: Vec<usize> = s.pretrain.clone();
        for p in s.train.iter().chain(&s.held_out) {
            assert_eq!((p.fit.len(), p.deploy.len()), (20, 400));
            all.extend(p.union());
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, sizes.total());
    }

    #[test]
    fn oversized_split_is_refused() {
        let bank = generate_bank(3, 100, 0.0, &LayoutParams::default(), &EnvParams::default()).unwrap();
        assert!(split_bank(&bank, &SplitSizes::default()).is_err());
    }
}
