//! Training data: analytic latent sources with closed-form conditionals, a
//! toy waveform VAE, residual vector quantization and latent normalization.

mod normalize;
pub mod rvq;
pub mod vae;
pub mod waveform;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use normalize::NormStats;

/// A sequence of `len` frames of `channels` reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: Vec<f64>,
    pub channels: usize,
    pub frame_rate: f64,
}

impl LatentSequence {
    pub fn new(frames: Vec<f64>, channels: usize, frame_rate: f64) -> Result<Self> {
        if channels == 0 || frames.len() % channels != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} values do not form frames of {channels} channels",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("latent frames must be finite".into()));
        }
        Ok(LatentSequence {
            frames,
            channels,
            frame_rate,
        })
    }

    pub fn empty(channels: usize, frame_rate: f64) -> Self {
        LatentSequence {
            frames: Vec::new(),
            channels,
            frame_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, s: usize) -> &[f64] {
        &self.frames[s * self.channels..(s + 1) * self.channels]
    }

    pub fn push(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.channels);
        self.frames.extend_from_slice(frame);
    }

    /// First `len` frames.
    pub fn prefix(&self, len: usize) -> LatentSequence {
        LatentSequence {
            frames: self.frames[..len * self.channels].to_vec(),
            channels: self.channels,
            frame_rate: self.frame_rate,
        }
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.len(), self.channels],
            self.frames.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    GaussianAr,
    GaussianMixtureAr,
    ToyVae,
}

/// One innovation component: shifts every channel by `mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
}

/// Synthetic latent process.
///
/// `x^s = a x^{s-1} + m_j + scale * eta`, `j ~ Cat(weights)` shared across
/// channels, `eta ~ N(0, I)`. The first frame is Gaussian with the process's
/// stationary mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSourceSpec {
    pub kind: SourceKind,
    pub channels: usize,
    pub seq_len: usize,
    pub frame_rate: f64,
    pub ar_coeff: f64,
    pub innovation_scale: f64,
    pub mixture: Vec<MixtureComponent>,
}

/// An isotropic Gaussian mixture over one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl FrameMixture {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let j = pick(&self.weights, rng);
        self.means[j]
            .iter()
            .map(|&m| m + self.std * rng::normal(rng))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let c = self.means[0].len();
        let mut out = vec![0.0; c];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, &v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

fn pick<R: rand::Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u = rng::uniform(rng);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

impl SyntheticSourceSpec {
    pub fn gaussian_ar(
        channels: usize,
        seq_len: usize,
        ar_coeff: f64,
        innovation_scale: f64,
    ) -> Self {
        SyntheticSourceSpec {
            kind: SourceKind::GaussianAr,
            channels,
            seq_len,
            frame_rate: 25.0,
            ar_coeff,
            innovation_scale,
            mixture: vec![MixtureComponent {
                weight: 1.0,
                mean: 0.0,
            }],
        }
    }

    pub fn mixture_ar(
        channels: usize,
        seq_len: usize,
        ar_coeff: f64,
        innovation_scale: f64,
        mixture: Vec<MixtureComponent>,
    ) -> Self {
        SyntheticSourceSpec {
            kind: SourceKind::GaussianMixtureAr,
            channels,
            seq_len,
            frame_rate: 25.0,
            ar_coeff,
            innovation_scale,
            mixture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.seq_len == 0 {
            return Err(Error::InvalidConfig(
                "channels and seq_len must be positive".into(),
            ));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidConfig("frame_rate must be positive".into()));
        }
        if self.kind == SourceKind::ToyVae {
            return Ok(());
        }
        if !(libm::fabs(self.ar_coeff) < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "AR coefficient {} is not stationary (|a| must be < 1)",
                self.ar_coeff
            )));
        }
        if !(self.innovation_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "innovation scale must be positive".into(),
            ));
        }
        if self.mixture.is_empty() {
            return Err(Error::InvalidConfig(
                "mixture needs at least one component".into(),
            ));
        }
        let total: f64 = self.mixture.iter().map(|c| c.weight).sum();
        if libm::fabs(total - 1.0) > 1e-9 || self.mixture.iter().any(|c| c.weight < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn innovation_mean(&self) -> f64 {
        self.mixture.iter().map(|c| c.weight * c.mean).sum()
    }

    /// Stationary per-channel mean and variance.
    pub fn stationary_moments(&self) -> (f64, f64) {
        let a = self.ar_coeff;
        let m = self.innovation_mean();
        let var_m: f64 = self
            .mixture
            .iter()
            .map(|c| c.weight * c.mean * c.mean)
            .sum::<f64>()
            - m * m;
        let var = (self.innovation_scale * self.innovation_scale + var_m) / (1.0 - a * a);
        (m / (1.0 - a), var)
    }

    /// Law of frame `history.len()` given the frames before it.
    pub fn conditional(&self, history: &LatentSequence) -> Result<FrameMixture> {
        if self.kind == SourceKind::ToyVae {
            return Err(Error::InvalidConfig(
                "toy-vae sources have no closed-form conditional".into(),
            ));
        }
        if history.channels != self.channels {
            return Err(crate::error::shape_err(
                "history channels",
                self.channels,
                history.channels,
            ));
        }
        let c = self.channels;
        if history.is_empty() {
            let (m, v) = self.stationary_moments();
            return Ok(FrameMixture {
                weights: vec![1.0],
                means: vec![vec![m; c]],
                std: libm::sqrt(v),
            });
        }
        let prev = history.frame(history.len() - 1);
        Ok(FrameMixture {
            weights: self.mixture.iter().map(|m| m.weight).collect(),
            means: self
                .mixture
                .iter()
                .map(|comp| {
                    prev.iter()
                        .map(|&x| self.ar_coeff * x + comp.mean)
                        .collect()
                })
                .collect(),
            std: self.innovation_scale,
        })
    }

    /// Draw one sequence; reproducible from `(spec, seed)`.
    pub fn sample_sequence(&self, seed: u64) -> Result<LatentSequence> {
        self.validate()?;
        if self.kind == SourceKind::ToyVae {
            return Err(Error::InvalidConfig(
                "toy-vae sequences come from encoding waveforms with a trained VAE".into(),
            ));
        }
        let mut r = rng::stream(seed, 0);
        let mut seq = LatentSequence::empty(self.channels, self.frame_rate);
        for _ in 0..self.seq_len {
            let law = self.conditional(&seq)?;
            let frame = law.sample(&mut r);
            seq.push(&frame);
        }
        Ok(seq)
    }

    /// `count` sequences with seeds derived from `seed`.
    pub fn sample_corpus(&self, count: usize, seed: u64) -> Result<Vec<LatentSequence>> {
        (0..count)
            .map(|i| self.sample_sequence(rng::mix(seed, i as u64)))
            .collect()
    }
}
