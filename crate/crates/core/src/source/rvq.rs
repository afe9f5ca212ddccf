//! Residual vector quantization with EMA k-means codebooks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;

/// `K` codebooks; codebook `k` holds `sizes[k]` centroids of `dim` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodebooks {
    pub dim: usize,
    pub books: Vec<Vec<f64>>,
}

/// Codes and quantized frame produced by [`RvqCodebooks::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub codes: Vec<usize>,
    pub quantized: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl RvqCodebooks {
    pub fn new(dim: usize, books: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || books.is_empty() {
            return Err(Error::InvalidConfig(
                "rvq needs a positive dim and at least one level".into(),
            ));
        }
        for b in &books {
            if b.is_empty() || b.len() % dim != 0 {
                return Err(Error::InvalidConfig(
                    "codebooks must be non-empty multiples of dim".into(),
                ));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::OutOfRange("codebook entries must be finite".into()));
            }
        }
        Ok(RvqCodebooks { dim, books })
    }

    pub fn zeros(dim: usize, sizes: &[usize]) -> Self {
        RvqCodebooks {
            dim,
            books: sizes.iter().map(|&n| vec![0.0; n * dim]).collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self, level: usize) -> usize {
        self.books[level].len() / self.dim
    }

    pub fn centroid(&self, level: usize, code: usize) -> &[f64] {
        &self.books[level][code * self.dim..(code + 1) * self.dim]
    }

    fn nearest(&self, level: usize, x: &[f64]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for j in 0..self.size(level) {
            let d = dist2(self.centroid(level, j), x);
            if d < bd {
                bd = d;
                best = j;
            }
        }
        best
    }

    /// Greedy residual encoding using the first `levels` codebooks.
    pub fn encode_levels(&self, x: &[f64], levels: usize) -> Result<Encoded> {
        if x.len() != self.dim {
            return Err(crate::error::shape_err("rvq input", self.dim, x.len()));
        }
        let mut residual = x.to_vec();
        let mut quantized = vec![0.0; self.dim];
        let mut codes = Vec::with_capacity(levels);
        for k in 0..levels.min(self.levels()) {
            let j = self.nearest(k, &residual);
            for ((r, q), &c) in residual
                .iter_mut()
                .zip(quantized.iter_mut())
                .zip(self.centroid(k, j))
            {
                *r -= c;
                *q += c;
            }
            codes.push(j);
        }
        Ok(Encoded { codes, quantized })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Encoded> {
        self.encode_levels(x, self.levels())
    }

    pub fn decode(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() > self.levels() {
            return Err(crate::error::shape_err(
                "rvq codes",
                self.levels(),
                codes.len(),
            ));
        }
        let mut out = vec![0.0; self.dim];
        for (k, &j) in codes.iter().enumerate() {
            if j >= self.size(k) {
                return Err(Error::OutOfRange(alloc::format!(
                    "code {j} at level {k} exceeds codebook size {}",
                    self.size(k)
                )));
            }
            for (o, &c) in out.iter_mut().zip(self.centroid(k, j)) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Encode every frame of a row-major `[n, dim]` buffer.
    pub fn encode_all(&self, frames: &[f64]) -> Result<Vec<Vec<usize>>> {
        frames
            .chunks(self.dim)
            .map(|f| self.encode(f).map(|e| e.codes))
            .collect()
    }
}

/// Online k-means trainer with exponential-moving-average centroid updates.
#[derive(Debug, Clone)]
pub struct RvqTrainer {
    pub books: RvqCodebooks,
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    pub decay: f64,
    /// Codes whose EMA count drops below this are re-seeded.
    pub dead_threshold: f64,
    rng: rng::Rng,
}

impl RvqTrainer {
    pub const DEFAULT_DECAY: f64 = 0.99;

    /// Codebooks initialised from the residuals of `init` frames.
    pub fn new(dim: usize, sizes: &[usize], init: &[f64], seed: u64) -> Result<Self> {
        if init.len() < dim || init.len() % dim != 0 {
            return Err(Error::NotEnoughSamples {
                needed: dim,
                got: init.len(),
            });
        }
        let mut r = rng::stream(seed, 7);
        let n = init.len() / dim;
        let mut books = RvqCodebooks::zeros(dim, sizes);
        let mut residual = init.to_vec();
        for (k, &size) in sizes.iter().enumerate() {
            for j in 0..size {
                let pick = (rng::uniform(&mut r) * n as f64) as usize % n;
                books.books[k][j * dim..(j + 1) * dim]
                    .copy_from_slice(&residual[pick * dim..(pick + 1) * dim]);
            }
            for f in residual.chunks_mut(dim) {
                let j = books.nearest(k, f);
                for (v, &c) in f.iter_mut().zip(books.centroid(k, j)) {
                    *v -= c;
                }
            }
        }
        let counts = sizes.iter().map(|&s| vec![1.0; s]).collect();
        let sums = books.books.clone();
        Ok(RvqTrainer {
            books,
            counts,
            sums,
            decay: Self::DEFAULT_DECAY,
            dead_threshold: 1e-3,
            rng: r,
        })
    }

    /// One EMA update of every level on a batch of frames; returns the mean
    /// squared reconstruction error before the update.
    pub fn update(&mut self, batch: &[f64]) -> Result<f64> {
        let dim = self.books.dim;
        if batch.is_empty() || batch.len() % dim != 0 {
            return Err(crate::error::shape_err(
                "rvq batch",
                dim,
                batch.len() % dim.max(1),
            ));
        }
        let n = batch.len() / dim;
        let mut residual = batch.to_vec();
        for k in 0..self.books.levels() {
            let size = self.books.size(k);
            let mut cnt = vec![0.0; size];
            let mut sum = vec![0.0; size * dim];
            let mut assign = Vec::with_capacity(n);
            for f in residual.chunks(dim) {
                let j = self.books.nearest(k, f);
                cnt[j] += 1.0;
                for (s, &v) in sum[j * dim..(j + 1) * dim].iter_mut().zip(f) {
                    *s += v;
                }
                assign.push(j);
            }
            let d = self.decay;
            for j in 0..size {
                self.counts[k][j] = d * self.counts[k][j] + (1.0 - d) * cnt[j];
                for c in 0..dim {
                    let s = &mut self.sums[k][j * dim + c];
                    *s = d * *s + (1.0 - d) * sum[j * dim + c];
                }
                if self.counts[k][j] < self.dead_threshold {
                    let pick = (rng::uniform(&mut self.rng) * n as f64) as usize % n;
                    let src = &residual[pick * dim..(pick + 1) * dim];
                    self.sums[k][j * dim..(j + 1) * dim].copy_from_slice(src);
                    self.counts[k][j] = 1.0;
                }
                let w = self.counts[k][j];
                for c in 0..dim {
                    self.books.books[k][j * dim + c] = self.sums[k][j * dim + c] / w;
                }
            }
            for (f, &j) in residual.chunks_mut(dim).zip(&assign) {
                for (v, &c) in f.iter_mut().zip(self.books.centroid(k, j)) {
                    *v -= c;
                }
            }
        }
        Ok(residual.iter().map(|v| v * v).sum::<f64>() / n as f64)
    }
}
