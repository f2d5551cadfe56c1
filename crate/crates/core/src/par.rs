//! Deterministic data-parallel Monte Carlo.
//!
//! Trials are grouped into fixed-size chunks; chunk `c` always consumes
//! stream `(seed, c)` and accumulates its trials in index order. Chunk
//! summaries are then merged by a fixed pairwise tree, so the result does not
//! depend on how many workers ran the chunks. With the `parallel` feature the
//! chunks are spread over the current rayon pool; without it (or with
//! [`Execution::Sequential`]) they run on the calling thread. Both paths
//! produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;
use crate::rng::{stream, StreamRng};

/// Trials evaluated against one RNG stream.
pub const TRIALS_PER_CHUNK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Running mean/variance (Welford), mergeable with Chan's update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct McStats {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl McStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &McStats) -> McStats {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let nf = n as f64;
        McStats {
            count: n,
            mean: self.mean + delta * other.count as f64 / nf,
            m2: self.m2 + other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / nf,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation.
    pub fn sd(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        (self.m2 / (self.count - 1) as f64).sqrt()
    }

    /// Standard error of the mean, `sd / sqrt(count)`.
    pub fn se(&self) -> f64 {
        self.sd() / (self.count as f64).sqrt()
    }

    pub fn from_slice(xs: &[f64]) -> McStats {
        let mut s = McStats::default();
        for &x in xs {
            s.push(x);
        }
        s
    }
}

/// Merges summaries with a fixed balanced tree over their order.
pub fn pairwise_merge(parts: &[McStats]) -> McStats {
    match parts.len() {
        0 => McStats::default(),
        1 => parts[0],
        n => {
            let (l, r) = parts.split_at(n / 2);
            pairwise_merge(l).merge(&pairwise_merge(r))
        }
    }
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (l, r) = xs.split_at(xs.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

/// Maps `f` over `items` in order, in parallel when allowed.
pub fn par_map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

fn chunk_bounds(trials: u64) -> Vec<(u64, u64)> {
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    (0..chunks)
        .map(|c| {
            let start = c * TRIALS_PER_CHUNK;
            (c, (trials - start).min(TRIALS_PER_CHUNK))
        })
        .collect()
}

/// Runs `trials` independent trials of a `D`-output experiment and returns
/// one summary per output.
pub fn run_trials_multi<const D: usize, F>(
    exec: Execution,
    seed: u64,
    trials: u64,
    f: F,
) -> Result<[McStats; D]>
where
    F: Fn(&mut StreamRng) -> Result<[f64; D]> + Sync + Send,
{
    let bounds = chunk_bounds(trials);
    let run_chunk = |_: usize, &(chunk, len): &(u64, u64)| -> Result<[McStats; D]> {
        let mut rng = stream(seed, chunk);
        let mut acc = [McStats::default(); D];
        for _ in 0..len {
            let out = f(&mut rng)?;
            for (a, x) in acc.iter_mut().zip(out) {
                a.push(x);
            }
        }
        Ok(acc)
    };
    let parts: Vec<[McStats; D]> = par_map(exec, &bounds, run_chunk)
        .into_iter()
        .collect::<Result<_>>()?;
    let mut out = [McStats::default(); D];
    for (d, slot) in out.iter_mut().enumerate() {
        let column: Vec<McStats> = parts.iter().map(|p| p[d]).collect();
        *slot = pairwise_merge(&column);
    }
    Ok(out)
}

/// Single-output form of [`run_trials_multi`].
pub fn run_trials<F>(exec: Execution, seed: u64, trials: u64, f: F) -> Result<McStats>
where
    F: Fn(&mut StreamRng) -> Result<f64> + Sync + Send,
{
    let [s] = run_trials_multi::<1, _>(exec, seed, trials, |rng| f(rng).map(|x| [x]))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn welford_matches_two_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.25).collect();
        let s = McStats::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((s.mean() - mean).abs() < 1e-12);
        assert!((s.sd() - var.sqrt()).abs() < 1e-12);
        let (a, b) = xs.split_at(313);
        let merged = McStats::from_slice(a).merge(&McStats::from_slice(b));
        assert!((merged.mean() - mean).abs() < 1e-12);
        assert!((merged.sd() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let f = |rng: &mut StreamRng| -> Result<f64> { Ok(rng.random::<f64>().ln()) };
        let a = run_trials(Execution::Sequential, 11, 50_000, f).unwrap();
        let b = run_trials(Execution::Parallel, 11, 50_000, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, 50_000);
    }

    #[test]
    fn first_error_propagates() {
        let r = run_trials(Execution::Sequential, 1, 10, |_| {
            Err(crate::Error::InvalidParameter("boom".into()))
        });
        assert!(r.is_err());
    }
}
