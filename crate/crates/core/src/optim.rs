//! AdamW with global-norm clipping and a warmup + cosine schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments, one pair per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum(),
    )
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        AdamW {
            config,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    /// Apply one update. `grads` must line up with the store's slots.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(crate::error::shape_err(
                "gradient slots",
                store.len(),
                grads.len(),
            ));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                op: "adamw",
                node: 0,
            });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let (ob1, ob2): (T, T) = (lit(1.0 - c.beta1), lit(1.0 - c.beta2));
        let sc: T = lit(scale);
        let step: T = lit(lr / bc1);
        let inv_bc2: T = lit(1.0 / bc2);
        let eps: T = lit(c.eps);
        let decay: T = lit(1.0 - lr * c.weight_decay);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * sc;
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step * m[j] / denom;
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
/// Steps past `total` are clamped.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    let s = step.min(total);
    if s < warmup {
        return peak * s as f64 / warmup as f64;
    }
    if total <= warmup {
        return if s >= total { 0.0 } else { peak };
    }
    let frac = (s - warmup) as f64 / (total - warmup) as f64;
    0.5 * peak * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

/// Default warmup: 5% of the run.
pub fn default_warmup(total: u64) -> u64 {
    total / 20
}
