//! Procedural waveforms: three harmonics whose amplitudes follow AR(1)
//! envelopes updated once per frame.

use alloc::vec::Vec;

use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSpec {
    /// Samples per latent frame.
    pub window: usize,
    pub frames: usize,
    pub envelope_coeff: f64,
    pub envelope_scale: f64,
}

impl Default for WaveformSpec {
    fn default() -> Self {
        WaveformSpec {
            window: 32,
            frames: 16,
            envelope_coeff: 0.9,
            envelope_scale: 0.2,
        }
    }
}

impl WaveformSpec {
    pub fn len(&self) -> usize {
        self.window * self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 3);
        let f0 = 0.01 + 0.04 * rng::uniform(&mut r);
        let phase: [f64; 3] =
            core::array::from_fn(|_| core::f64::consts::TAU * rng::uniform(&mut r));
        let mut amp: [f64; 3] = core::array::from_fn(|h| 0.5 / (h + 1) as f64);
        let mut out = Vec::with_capacity(self.len());
        for s in 0..self.frames {
            if s > 0 {
                for (h, a) in amp.iter_mut().enumerate() {
                    let base = 0.5 / (h + 1) as f64;
                    let dev = self.envelope_coeff * (*a - base)
                        + self.envelope_scale * base * rng::normal(&mut r);
                    *a = (base + dev).max(0.0);
                }
            }
            for i in 0..self.window {
                let n = (s * self.window + i) as f64;
                let mut v = 0.0;
                for (h, a) in amp.iter().enumerate() {
                    v += a * libm::sin(core::f64::consts::TAU * f0 * (h + 1) as f64 * n + phase[h]);
                }
                out.push(v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let spec = WaveformSpec::default();
        let a = spec.sample(4);
        assert_eq!(a, spec.sample(4));
        assert_eq!(a.len(), spec.len());
        assert!(a.iter().all(|v| v.is_finite() && v.abs() < 5.0));
        assert_ne!(a, spec.sample(5));
    }
}
