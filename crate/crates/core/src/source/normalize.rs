use alloc::vec;
use alloc::vec::Vec;

use super::LatentSequence;
use crate::error::{Error, Result};

/// Per-channel centering and scaling fitted on a training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population mean and standard deviation of every frame in `corpus`.
    pub fn fit(corpus: &[LatentSequence]) -> Result<Self> {
        let first = corpus
            .iter()
            .find(|s| !s.is_empty())
            .ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
        let c = first.channels;
        let mut n = 0usize;
        let mut mean = vec![0.0; c];
        let mut m2 = vec![0.0; c];
        for seq in corpus {
            if seq.channels != c {
                return Err(crate::error::shape_err("corpus channels", c, seq.channels));
            }
            for s in 0..seq.len() {
                n += 1;
                for (ch, &x) in seq.frame(s).iter().enumerate() {
                    let d = x - mean[ch];
                    mean[ch] += d / n as f64;
                    m2[ch] += d * (x - mean[ch]);
                }
            }
        }
        let std: Vec<f64> = m2.iter().map(|v| libm::sqrt(v / n as f64)).collect();
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(crate::error::shape_err(
                "stats",
                self.mean.len(),
                self.std.len(),
            ));
        }
        for (channel, &s) in self.std.iter().enumerate() {
            if !(s > 1e-12) || !s.is_finite() {
                return Err(Error::ZeroStd { channel });
            }
        }
        Ok(())
    }

    fn check(&self, seq: &LatentSequence) -> Result<()> {
        if seq.channels != self.channels() {
            return Err(crate::error::shape_err(
                "normalization channels",
                self.channels(),
                seq.channels,
            ));
        }
        self.validate()
    }

    pub fn normalize(&self, seq: &LatentSequence) -> Result<LatentSequence> {
        self.check(seq)?;
        let c = seq.channels;
        let frames = seq
            .frames
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i % c]) / self.std[i % c])
            .collect();
        Ok(LatentSequence {
            frames,
            ..seq.clone()
        })
    }

    pub fn denormalize(&self, seq: &LatentSequence) -> Result<LatentSequence> {
        self.check(seq)?;
        let c = seq.channels;
        let frames = seq
            .frames
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.std[i % c] + self.mean[i % c])
            .collect();
        Ok(LatentSequence {
            frames,
            ..seq.clone()
        })
    }
}
