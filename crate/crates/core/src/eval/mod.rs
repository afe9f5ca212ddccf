//! Quality metrics, distributional tests and timing reports.

pub mod bench;
pub mod energy;
pub mod frechet;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;
use crate::source::LatentSequence;

pub use bench::{bench, BenchReport, BenchRow, BenchSystem};
pub use energy::{conditional_oracle_test, energy_distance, energy_test, EnergyTest};
pub use frechet::{frechet_distance, frechet_with_ci, FrechetReport};

/// Frozen random projection of flattened frame windows followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub channels: usize,
    pub window: usize,
    pub dim: usize,
    pub seed: u64,
    weights: Vec<f64>,
}

impl Embedder {
    pub fn new(channels: usize, window: usize, dim: usize, seed: u64) -> Result<Self> {
        if channels == 0 || window == 0 || dim == 0 {
            return Err(Error::InvalidConfig(
                "embedder dimensions must be positive".into(),
            ));
        }
        let mut r = rng::stream(seed, 31);
        let fan = (channels * window) as f64;
        let s = 1.0 / libm::sqrt(fan);
        let weights = (0..dim * channels * window)
            .map(|_| s * rng::normal(&mut r))
            .collect();
        Ok(Embedder {
            channels,
            window,
            dim,
            seed,
            weights,
        })
    }

    fn project(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (o, w) in out.iter_mut().zip(self.weights.chunks_exact(n)) {
            *o += libm::tanh(w.iter().zip(x).map(|(a, b)| a * b).sum());
        }
    }

    /// Mean feature over the non-overlapping windows of `seq`.
    pub fn embed(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        if seq.channels != self.channels {
            return Err(crate::error::shape_err(
                "embedder channels",
                self.channels,
                seq.channels,
            ));
        }
        let windows = seq.len() / self.window;
        if windows == 0 {
            return Err(Error::NotEnoughSamples {
                needed: self.window,
                got: seq.len(),
            });
        }
        let stride = self.window * self.channels;
        let mut out = alloc::vec![0.0; self.dim];
        for wi in 0..windows {
            self.project(&seq.frames[wi * stride..(wi + 1) * stride], &mut out);
        }
        for o in &mut out {
            *o /= windows as f64;
        }
        Ok(out)
    }

    pub fn embed_all(&self, seqs: &[LatentSequence]) -> Result<Vec<Vec<f64>>> {
        seqs.iter().map(|s| self.embed(s)).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    dot / libm::sqrt(na * nb)
}

/// Mean cosine similarity over unordered pairs; higher means less diverse.
pub fn diversity(embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: n });
    }
    let normed: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let norm = libm::sqrt(e.iter().map(|x| x * x).sum::<f64>());
            if !(norm > 0.0) {
                return Err(Error::ZeroNorm { index: i });
            }
            Ok(e.iter().map(|x| x / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += normed[i]
                .iter()
                .zip(&normed[j])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Per-column mean and unbiased covariance (row-major `d x d`).
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = alloc::vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = alloc::vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let a = s[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += a * (s[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_generations_have_unit_similarity() {
        let e = vec![vec![0.3, -1.0, 2.0]; 4];
        assert!((diversity(&e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_has_zero_similarity() {
        assert_eq!(diversity(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(), 0.0);
    }

    #[test]
    fn zero_embedding_is_rejected() {
        assert!(matches!(
            diversity(&[vec![1.0], vec![0.0]]),
            Err(Error::ZeroNorm { index: 1 })
        ));
    }

    #[test]
    fn embedder_is_deterministic_and_windowed() {
        let a = Embedder::new(2, 3, 5, 7).unwrap();
        let b = Embedder::new(2, 3, 5, 7).unwrap();
        let seq = LatentSequence::new((0..14).map(|i| i as f64 * 0.1).collect(), 2, 25.0).unwrap();
        assert_eq!(a.embed(&seq).unwrap(), b.embed(&seq).unwrap());
        let short = LatentSequence::new(vec![0.0; 4], 2, 25.0).unwrap();
        assert!(a.embed(&short).is_err());
    }
}
