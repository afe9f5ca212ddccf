//! Toy waveform VAE: windows of samples map to diagonal Gaussian posteriors
//! over `latent_dim` channels. Trained with reconstruction and KL only.

use alloc::vec::Vec;

use super::LatentSequence;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore, Positional, Transformer};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub window: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub kl_weight: f64,
    /// Bounds applied to the predicted log-variance.
    pub logvar_clamp: Option<(f64, f64)>,
    pub frame_rate: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            window: 32,
            latent_dim: 8,
            model_dim: 32,
            mlp_dim: 64,
            heads: 2,
            layers: 1,
            kl_weight: 0.01,
            logvar_clamp: Some((-10.0, 10.0)),
            frame_rate: 25.0,
        }
    }
}

/// Which latent to hand to the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Posterior {
    Mean,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean per-dimension KL of `N(mu, exp(logvar))` from `N(0, 1)`.
pub fn kl_to_standard(mu: &[f64], logvar: &[f64]) -> f64 {
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + libm::exp(lv) - 1.0 - lv))
        .sum();
    s / mu.len() as f64
}

/// Mean squared error between a waveform and its reconstruction.
pub fn reconstruction_error(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone)]
pub struct Vae<T: Scalar> {
    pub config: VaeConfig,
    pub store: ParamStore<T>,
    enc_in: Linear,
    enc: Transformer,
    enc_out: Linear,
    dec_in: Linear,
    dec: Transformer,
    dec_out: Linear,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.window == 0
            || config.latent_dim == 0
            || config.model_dim % config.heads.max(1) != 0
        {
            return Err(Error::InvalidConfig(
                "vae dims must be positive and heads must divide model_dim".into(),
            ));
        }
        if !(config.kl_weight > 0.0) {
            return Err(Error::InvalidConfig("kl weight must be positive".into()));
        }
        let mut r = rng::stream(seed, 11);
        let mut store = ParamStore::new();
        let c = &config;
        let enc_in = Linear::new(
            &mut store,
            &mut r,
            "vae.enc.in",
            c.window,
            c.model_dim,
            true,
        );
        let enc = Transformer::new(
            &mut store,
            &mut r,
            "vae.enc",
            c.layers,
            c.model_dim,
            c.mlp_dim,
            c.heads,
            Positional::Rotary,
        );
        let enc_out = Linear::with_std(
            &mut store,
            &mut r,
            "vae.enc.out",
            c.model_dim,
            2 * c.latent_dim,
            true,
            0.02,
        );
        let dec_in = Linear::new(
            &mut store,
            &mut r,
            "vae.dec.in",
            c.latent_dim,
            c.model_dim,
            true,
        );
        let dec = Transformer::new(
            &mut store,
            &mut r,
            "vae.dec",
            c.layers,
            c.model_dim,
            c.mlp_dim,
            c.heads,
            Positional::Rotary,
        );
        let dec_out = Linear::new(
            &mut store,
            &mut r,
            "vae.dec.out",
            c.model_dim,
            c.window,
            true,
        );
        Ok(Vae {
            config,
            store,
            enc_in,
            enc,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    fn frames_of(&self, waves: &[Vec<f64>]) -> Result<(usize, Tensor<T>)> {
        let w = self.config.window;
        let len = waves.first().map(|x| x.len()).unwrap_or(0);
        if len == 0 || len % w != 0 || waves.iter().any(|x| x.len() != len) {
            return Err(Error::InvalidConfig(
                "waveforms must share a length that is a multiple of the window".into(),
            ));
        }
        let data = waves.iter().flatten().map(|&v| lit(v)).collect();
        Ok((len / w, Tensor::from_vec(&[waves.len() * len / w, w], data)))
    }

    fn encode_graph(&self, cx: &mut Ctx<'_, T>, x: Var, batch: usize, frames: usize) -> (Var, Var) {
        let h = self.enc_in.forward(cx, x);
        let h = self.enc.forward(cx, h, batch, frames);
        let o = self.enc_out.forward(cx, h);
        let c = self.config.latent_dim;
        let mu = cx.g.slice_cols(o, 0, c);
        let mut lv = cx.g.slice_cols(o, c, c);
        if let Some((lo, hi)) = self.config.logvar_clamp {
            lv = cx.g.clamp(lv, lit(lo), lit(hi));
        }
        (mu, lv)
    }

    fn decode_graph(&self, cx: &mut Ctx<'_, T>, z: Var, batch: usize, frames: usize) -> Var {
        let h = self.dec_in.forward(cx, z);
        let h = self.dec.forward(cx, h, batch, frames);
        self.dec_out.forward(cx, h)
    }

    /// One optimizer update on a batch of equal-length waveforms.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW<T>,
        waves: &[Vec<f64>],
        lr: f64,
        seed: u64,
    ) -> Result<VaeLoss> {
        let (frames, x) = self.frames_of(waves)?;
        let batch = waves.len();
        let rows = batch * frames;
        let c = self.config.latent_dim;
        let mut r = rng::stream(seed, 12);
        let eta = Tensor::from_vec(
            &[rows, c],
            (0..rows * c).map(|_| lit(rng::normal(&mut r))).collect(),
        );
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, true);
        let xv = cx.constant(x);
        let (mu, lv) = self.encode_graph(&mut cx, xv, batch, frames);
        let half = cx.g.scale(lv, lit(0.5));
        let sd = cx.g.exp(half);
        let eta = cx.constant(eta);
        let noise = cx.g.mul(sd, eta);
        let z = cx.g.add(mu, noise);
        let y = self.decode_graph(&mut cx, z, batch, frames);
        let diff = cx.g.sub(y, xv);
        let sq = cx.g.square(diff);
        let recon = cx.g.mean(sq);
        let mu2 = cx.g.square(mu);
        let ev = cx.g.exp(lv);
        let a = cx.g.add(mu2, ev);
        let a = cx.g.sub(a, lv);
        let a = cx.g.add_scalar(a, lit(-1.0));
        let kl = cx.g.mean(a);
        let kl = cx.g.scale(kl, lit(0.5));
        let wkl = cx.g.scale(kl, lit(self.config.kl_weight));
        let total = cx.g.add(recon, wkl);
        let bind = cx.into_bindings();
        let report = VaeLoss {
            reconstruction: g.value(recon).data()[0].to_f64_lossy(),
            kl: g.value(kl).data()[0].to_f64_lossy(),
            total: g.value(total).data()[0].to_f64_lossy(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                op: "vae_loss",
                node: total.index(),
            });
        }
        let grads = g.backward(total)?;
        let gs = bind.gradients(&grads, &self.store);
        opt.step(&mut self.store, &gs, lr)?;
        Ok(report)
    }

    /// Posterior means and log-variances, both `[frames, latent_dim]`.
    pub fn encode(&self, wave: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (frames, x) = self.frames_of(core::slice::from_ref(&wave.to_vec()))?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let xv = cx.constant(x);
        let (mu, lv) = self.encode_graph(&mut cx, xv, 1, frames);
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn latents(&self, wave: &[f64], posterior: Posterior) -> Result<LatentSequence> {
        let (mu, lv) = self.encode(wave)?;
        let mut frames = mu.to_f64_vec();
        if let Posterior::Sample { seed } = posterior {
            let mut r = rng::stream(seed, 13);
            for (z, l) in frames.iter_mut().zip(lv.to_f64_vec()) {
                *z += libm::exp(0.5 * l) * rng::normal(&mut r);
            }
        }
        LatentSequence::new(frames, self.config.latent_dim, self.config.frame_rate)
    }

    pub fn decode(&self, latents: &LatentSequence) -> Result<Vec<f64>> {
        if latents.channels != self.config.latent_dim {
            return Err(crate::error::shape_err(
                "vae latent dim",
                self.config.latent_dim,
                latents.channels,
            ));
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let z = cx.constant(latents.to_tensor());
        let y = self.decode_graph(&mut cx, z, 1, latents.len());
        Ok(g.value(y).to_f64_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::source::waveform::WaveformSpec;

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_to_standard(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_to_standard(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_is_zero_only_when_exact() {
        assert_eq!(reconstruction_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(reconstruction_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.0);
    }

    #[test]
    fn latents_have_configured_shape() {
        let cfg = VaeConfig::default();
        let vae = Vae::<f64>::new(cfg.clone(), 1).unwrap();
        let wave = WaveformSpec::default().sample(2);
        let z = vae.latents(&wave, Posterior::Mean).unwrap();
        assert_eq!((z.len(), z.channels), (16, cfg.latent_dim));
        let s = vae.latents(&wave, Posterior::Sample { seed: 3 }).unwrap();
        assert_ne!(z, s);
        assert_eq!(vae.decode(&z).unwrap().len(), wave.len());
    }

    #[test]
    fn zero_kl_weight_rejected() {
        let cfg = VaeConfig {
            kl_weight: 0.0,
            ..VaeConfig::default()
        };
        assert!(Vae::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn one_step_is_finite() {
        let mut vae = Vae::<f32>::new(VaeConfig::default(), 1).unwrap();
        let mut opt = AdamW::new(&vae.store, AdamConfig::default());
        let waves: Vec<_> = (0..2).map(|i| WaveformSpec::default().sample(i)).collect();
        let l = vae.train_step(&mut opt, &waves, 1e-3, 0).unwrap();
        assert!(l.total.is_finite() && l.reconstruction >= 0.0 && l.kl >= 0.0);
    }
}
