//! Energy-distance two-sample test and the analytic-conditional oracle check.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::sampling::sample_next_frames;
use crate::source::{LatentSequence, NormStats, SyntheticSourceSpec};
use crate::tensor::Scalar;

pub const DEFAULT_PERMUTATIONS: usize = 199;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl EnergyTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Unbiased energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|`.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let m = PairMatrix::new(&pooled);
    let labels: Vec<bool> = (0..pooled.len()).map(|i| i < x.len()).collect();
    Ok(m.statistic(&labels, x.len()))
}

struct PairMatrix {
    n: usize,
    d: Vec<f64>,
    total: f64,
}

impl PairMatrix {
    fn new(points: &[&[f64]]) -> Self {
        let n = points.len();
        let mut d = alloc::vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let v = dist(points[i], points[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
                total += v;
            }
        }
        PairMatrix { n, d, total }
    }

    fn within(&self, idx: &[usize]) -> f64 {
        let mut s = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            let row = &self.d[i * self.n..(i + 1) * self.n];
            for &j in &idx[k + 1..] {
                s += row[j];
            }
        }
        s
    }

    fn statistic(&self, labels: &[bool], nx: usize) -> f64 {
        let xs: Vec<usize> = (0..self.n).filter(|&i| labels[i]).collect();
        let ys: Vec<usize> = (0..self.n).filter(|&i| !labels[i]).collect();
        let ny = self.n - nx;
        let sx = self.within(&xs);
        let sy = self.within(&ys);
        let cross = self.total - sx - sy;
        let (fx, fy) = (nx as f64, ny as f64);
        2.0 * cross / (fx * fy) - 2.0 * sx / (fx * (fx - 1.0)) - 2.0 * sy / (fy * (fy - 1.0))
    }
}

/// Permutation test of equal distributions; `p = (1 + #{E* >= E}) / (1 + P)`.
pub fn energy_test(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    permutations: usize,
    seed: u64,
) -> Result<EnergyTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let m = PairMatrix::new(&pooled);
    let nx = x.len();
    let mut labels: Vec<bool> = (0..pooled.len()).map(|i| i < nx).collect();
    let observed = m.statistic(&labels, nx);
    let mut r = rng::stream(seed, 33);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        labels.shuffle(&mut r);
        if m.statistic(&labels, nx) >= observed {
            exceed += 1;
        }
    }
    Ok(EnergyTest {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub steps: usize,
    pub temperature: f64,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            steps: 1,
            temperature: 1.0,
            permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
        }
    }
}

/// Compare `n` model draws of the frame after `history` (raw scale) with
/// `n` draws from the source's exact conditional.
pub fn conditional_oracle_test<T: Scalar>(
    model: &Model<T>,
    stats: &NormStats,
    source: &SyntheticSourceSpec,
    history: &LatentSequence,
    n: usize,
    opts: OracleOptions,
) -> Result<EnergyTest> {
    if n < 100 {
        return Err(Error::NotEnoughSamples {
            needed: 100,
            got: n,
        });
    }
    let oracle = source.conditional(history)?;
    let mut r = rng::stream(opts.seed, 34);
    let truth: Vec<Vec<f64>> = (0..n).map(|_| oracle.sample(&mut r)).collect();
    let model_draws = model_conditional_samples(model, stats, history, n, opts)?;
    energy_test(
        &model_draws,
        &truth,
        opts.permutations,
        rng::mix(opts.seed, 35),
    )
}

/// `n` model draws of the next frame, mapped back to the raw scale.
pub fn model_conditional_samples<T: Scalar>(
    model: &Model<T>,
    stats: &NormStats,
    history: &LatentSequence,
    n: usize,
    opts: OracleOptions,
) -> Result<Vec<Vec<f64>>> {
    let norm = stats.normalize(history)?;
    let rows = sample_next_frames(
        model,
        &norm,
        opts.steps,
        opts.temperature,
        n,
        rng::mix(opts.seed, 36),
    )?;
    Ok(rows
        .into_iter()
        .map(|f| {
            f.iter()
                .enumerate()
                .map(|(c, v)| v * stats.std[c] + stats.mean[c])
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|_| (0..d).map(|_| rng::normal(&mut r) + shift).collect())
            .collect()
    }

    #[test]
    fn brute_force_statistic() {
        let x = gauss(7, 2, 0.0, 1);
        let y = gauss(5, 2, 0.5, 2);
        let mean = |a: &[Vec<f64>], b: &[Vec<f64>], skip_diag: bool| {
            let mut s = 0.0;
            let mut c = 0.0;
            for (i, p) in a.iter().enumerate() {
                for (j, q) in b.iter().enumerate() {
                    if skip_diag && i == j {
                        continue;
                    }
                    s += dist(p, q);
                    c += 1.0;
                }
            }
            s / c
        };
        let want = 2.0 * mean(&x, &y, false) - mean(&x, &x, true) - mean(&y, &y, true);
        assert!((energy_distance(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn detects_a_shift() {
        let t = energy_test(&gauss(300, 2, 0.0, 3), &gauss(300, 2, 1.0, 4), 99, 0).unwrap();
        assert!(t.rejects(0.01));
    }
}
