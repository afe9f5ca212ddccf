//! Conditioning stack: a causal long-context transformer over (optionally
//! noise-injected) history and a short transformer over the last `K` clean
//! frames. Their outputs are summed into the per-step conditioning vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    randn, Ctx, Embedding, KvCache, Linear, ParamId, ParamStore, Positional, Transformer,
};
use crate::rng;
use crate::tensor::{lit, Scalar, Tensor};

/// How frames enter the long transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameInput {
    Continuous,
    /// Sum of per-level code embeddings, one codebook size per level.
    Codes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub short_layers: usize,
    pub short_context: usize,
    pub short_enabled: bool,
    pub noise_injection: bool,
    pub input: FrameInput,
}

impl BackboneConfig {
    pub fn new(channels: usize, model_dim: usize, heads: usize, layers: usize) -> Self {
        BackboneConfig {
            channels,
            model_dim,
            mlp_dim: 2 * model_dim,
            heads,
            layers,
            short_layers: 1,
            short_context: 10,
            short_enabled: true,
            noise_injection: true,
            input: FrameInput::Continuous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.model_dim == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "backbone dims and layer count must be positive".into(),
            ));
        }
        if self.heads == 0
            || self.model_dim % self.heads != 0
            || (self.model_dim / self.heads) % 2 != 0
        {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must split into {} heads of even width",
                self.model_dim, self.heads
            )));
        }
        if self.short_enabled && (self.short_context == 0 || self.short_layers == 0) {
            return Err(Error::InvalidConfig(
                "short context needs K >= 1 and at least one layer".into(),
            ));
        }
        if let FrameInput::Codes(sizes) = &self.input {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::InvalidConfig(
                    "code input needs non-empty codebooks".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `sqrt(k) * eps + sqrt(1 - k) * x`.
pub fn inject_noise(x: &[f64], k: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::OutOfRange(format!("noise level {k} outside [0, 1]")));
    }
    if x.len() != eps.len() {
        return Err(crate::error::shape_err("noise frame", x.len(), eps.len()));
    }
    let (a, b) = (libm::sqrt(k), libm::sqrt(1.0 - k));
    Ok(x.iter().zip(eps).map(|(&x, &e)| a * e + b * x).collect())
}

/// Per-position noise levels and noise frames for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub k: Vec<f64>,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: rand::Rng + ?Sized>(rows: usize, channels: usize, rng: &mut R) -> Self {
        let k = (0..rows).map(|_| rng::uniform(rng)).collect();
        let eps = (0..rows * channels).map(|_| rng::normal(rng)).collect();
        NoiseDraw { k, eps }
    }

    pub fn apply<T: Scalar>(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let c = frames.cols();
        if self.k.len() != frames.rows() || self.eps.len() != frames.len() {
            return Err(crate::error::shape_err(
                "noise draw",
                frames.rows(),
                self.k.len(),
            ));
        }
        let mut out = Vec::with_capacity(frames.len());
        for r in 0..frames.rows() {
            let x: Vec<f64> = frames.row(r).iter().map(|v| v.to_f64_lossy()).collect();
            let y = inject_noise(&x, self.k[r], &self.eps[r * c..(r + 1) * c])?;
            out.extend(y.into_iter().map(lit::<T>));
        }
        Ok(Tensor::from_vec(frames.shape(), out))
    }
}

/// Training batch: `batch` sequences of `len` frames stacked row-wise.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T> {
    pub frames: &'a Tensor<T>,
    /// `[batch * len * levels]`, required for code input.
    pub codes: Option<&'a [usize]>,
    pub batch: usize,
    pub len: usize,
}

/// Graph nodes for `Z = z_long + z_short`, one row per position.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    pub z_long: Var,
    pub z_short: Option<Var>,
    pub z: Var,
}

/// Instrumented copies of what each transformer consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps<T> {
    pub long_frames: Tensor<T>,
    pub short_frames: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Short {
    input: Linear,
    bos: ParamId,
    pos: Embedding,
    net: Transformer,
    context: usize,
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    input: Linear,
    codes: Vec<Embedding>,
    bos: ParamId,
    long: Transformer,
    short: Option<Short>,
    forwards: AtomicU64,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Backbone {
            config: self.config.clone(),
            input: self.input.clone(),
            codes: self.codes.clone(),
            bos: self.bos,
            long: self.long.clone(),
            short: self.short.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

/// `Z = z_long + z_short`, elementwise.
pub fn condition<T: Scalar>(z_long: &Tensor<T>, z_short: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match z_short {
        None => Ok(z_long.clone()),
        Some(s) => {
            if s.shape() != z_long.shape() {
                return Err(crate::error::shape_err(
                    "conditioning parts",
                    z_long.shape().to_vec(),
                    s.shape().to_vec(),
                ));
            }
            Ok(z_long.zip_map(s, |a, b| a + b))
        }
    }
}

impl Backbone {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: BackboneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let input = Linear::new(store, rng, "backbone.input", config.channels, d, true);
        let codes = match &config.input {
            FrameInput::Continuous => Vec::new(),
            FrameInput::Codes(sizes) => sizes
                .iter()
                .enumerate()
                .map(|(k, &n)| {
                    Embedding::new(
                        store,
                        rng,
                        &format!("backbone.codes.{k}"),
                        n,
                        d,
                        1.0 / libm::sqrt(d as f64),
                    )
                })
                .collect(),
        };
        let bos = store.add("backbone.bos", randn(rng, 1, d, 1.0 / libm::sqrt(d as f64)));
        let long = Transformer::new(
            store,
            rng,
            "backbone.long",
            config.layers,
            d,
            config.mlp_dim,
            config.heads,
            Positional::Rotary,
        );
        let short = config.short_enabled.then(|| {
            let k = config.short_context;
            Short {
                input: Linear::new(store, rng, "backbone.short.input", config.channels, d, true),
                bos: store.add(
                    "backbone.short.bos",
                    randn(rng, 1, d, 1.0 / libm::sqrt(d as f64)),
                ),
                pos: Embedding::new(store, rng, "backbone.short.pos", k, d, 0.02),
                net: Transformer::new(
                    store,
                    rng,
                    "backbone.short",
                    config.short_layers,
                    d,
                    config.mlp_dim,
                    config.heads,
                    Positional::External,
                ),
                context: k,
            }
        });
        Ok(Backbone {
            config,
            input,
            codes,
            bos,
            long,
            short,
            forwards: AtomicU64::new(0),
        })
    }

    /// Number of sequences pushed through the long transformer so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn has_short(&self) -> bool {
        self.short.is_some()
    }

    fn embed_long<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        frames: &Tensor<T>,
        codes: Option<&[usize]>,
    ) -> Result<Var> {
        match &self.config.input {
            FrameInput::Continuous => {
                let x = cx.constant(frames.clone());
                Ok(self.input.forward(cx, x))
            }
            FrameInput::Codes(sizes) => {
                let codes = codes
                    .ok_or_else(|| Error::InvalidConfig("code input requires codes".into()))?;
                let levels = sizes.len();
                let rows = codes.len() / levels;
                let mut acc: Option<Var> = None;
                for (k, emb) in self.codes.iter().enumerate() {
                    let idx: Vec<usize> = (0..rows).map(|r| codes[r * levels + k]).collect();
                    if let Some(&bad) = idx.iter().find(|&&i| i >= sizes[k]) {
                        return Err(Error::OutOfRange(format!(
                            "code {bad} at level {k} exceeds {}",
                            sizes[k]
                        )));
                    }
                    let e = emb.forward(cx, &idx);
                    acc = Some(match acc {
                        None => e,
                        Some(a) => cx.g.add(a, e),
                    });
                }
                Ok(acc.expect("at least one level"))
            }
        }
    }

    /// Teacher-forced forward over a batch. `noise` (when noise injection is
    /// enabled) corrupts the long transformer's inputs only.
    pub fn forward_train<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        input: &BatchInput<'_, T>,
        noise: Option<&NoiseDraw>,
    ) -> Result<(Conditioning, Taps<T>)> {
        let (b, s) = (input.batch, input.len);
        let rows = b * s;
        if input.frames.rows() != rows || input.frames.cols() != self.config.channels {
            return Err(crate::error::shape_err(
                "backbone frames",
                (rows, self.config.channels),
                (input.frames.rows(), input.frames.cols()),
            ));
        }
        let long_frames = match (noise, self.config.noise_injection) {
            (Some(n), true) => n.apply(input.frames)?,
            _ => input.frames.clone(),
        };
        let proj = self.embed_long(cx, &long_frames, input.codes)?;
        let bos = cx.param(self.bos);
        let table = cx.g.concat_rows(&[bos, proj]);
        let idx: Vec<usize> = (0..b)
            .flat_map(|bi| (0..s).map(move |p| if p == 0 { 0 } else { 1 + bi * s + p - 1 }))
            .collect();
        let h = cx.g.gather_rows(table, &idx);
        let z_long = self.long.forward(cx, h, b, s);
        self.forwards.fetch_add(b as u64, Ordering::Relaxed);
        let z_short = match &self.short {
            None => None,
            Some(sh) => Some(self.short_train(cx, sh, input.frames, b, s)),
        };
        let z = match z_short {
            Some(zs) => cx.g.add(z_long, zs),
            None => z_long,
        };
        Ok((
            Conditioning { z_long, z_short, z },
            Taps {
                long_frames,
                short_frames: input.frames.clone(),
            },
        ))
    }

    fn short_train<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        sh: &Short,
        frames: &Tensor<T>,
        b: usize,
        s: usize,
    ) -> Var {
        let k = sh.context;
        let x = cx.constant(frames.clone());
        let proj = sh.input.forward(cx, x);
        let bos = cx.param(sh.bos);
        let table = cx.g.concat_rows(&[bos, proj]);
        let mut idx = Vec::with_capacity(b * s * k);
        for bi in 0..b {
            for p in 0..s {
                for j in 0..k {
                    // window slot j holds frame p - k + j
                    let src = p as isize - k as isize + j as isize;
                    idx.push(if src < 0 {
                        0
                    } else {
                        1 + bi * s + src as usize
                    });
                }
            }
        }
        let h = cx.g.gather_rows(table, &idx);
        let pos_idx: Vec<usize> = (0..b * s).flat_map(|_| 0..k).collect();
        let pos = sh.pos.forward(cx, &pos_idx);
        let h = cx.g.add(h, pos);
        let out = sh.net.forward(cx, h, b * s, k);
        let last: Vec<usize> = (0..b * s).map(|w| w * k + k - 1).collect();
        cx.g.gather_rows(out, &last)
    }

    fn short_window<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        sh: &Short,
        history: &[Vec<f64>],
    ) -> Var {
        let k = sh.context;
        let have = history.len().min(k);
        let pad = k - have;
        let bos = cx.param(sh.bos);
        let mut parts = vec![bos; pad];
        if have > 0 {
            let recent = &history[history.len() - have..];
            let data: Vec<T> = recent.iter().flatten().map(|&v| lit(v)).collect();
            let x = cx.constant(Tensor::from_vec(&[have, self.config.channels], data));
            let p = sh.input.forward(cx, x);
            parts.push(p);
        }
        let h = if parts.len() == 1 {
            parts[0]
        } else {
            cx.g.concat_rows(&parts)
        };
        let pos_idx: Vec<usize> = (0..k).collect();
        let pos = sh.pos.forward(cx, &pos_idx);
        let h = cx.g.add(h, pos);
        let out = sh.net.forward(cx, h, 1, k);
        cx.g.gather_rows(out, &[k - 1])
    }

    pub fn new_session<T: Scalar>(&self) -> Session<T> {
        Session {
            cache: self.long.new_cache(),
            frames: Vec::new(),
            codes: Vec::new(),
        }
    }

    /// Conditioning for the frame after everything pushed into `session`,
    /// feeding only the newest frame through the long transformer.
    pub fn next<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        session: &mut Session<T>,
    ) -> Result<Conditioning> {
        let pos = session.frames.len();
        if session.cache.len() != pos {
            return Err(Error::CacheMismatch {
                cached: session.cache.len(),
                expected: pos,
            });
        }
        let row = if pos == 0 {
            cx.param(self.bos)
        } else {
            let frame = Tensor::from_vec(
                &[1, self.config.channels],
                session.frames[pos - 1].iter().map(|&v| lit(v)).collect(),
            );
            let codes = session.codes.last().map(|c| c.as_slice());
            self.embed_long(cx, &frame, codes)?
        };
        if pos == 0 {
            self.forwards.fetch_add(1, Ordering::Relaxed);
        }
        let z_long = self.long.forward_cached(cx, row, &mut session.cache)?;
        self.finish(cx, z_long, &session.frames)
    }

    /// Feed a whole prompt into an empty session in one cached pass. The
    /// next call to [`Backbone::next`] conditions on every prompt frame.
    pub fn prefill<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        session: &mut Session<T>,
        frames: &[Vec<f64>],
        codes: &[Vec<usize>],
    ) -> Result<()> {
        if !session.is_empty() || session.cache.len() != 0 {
            return Err(Error::CacheMismatch {
                cached: session.cache.len(),
                expected: 0,
            });
        }
        if frames.is_empty() {
            return Ok(());
        }
        let p = frames.len();
        let bos = cx.param(self.bos);
        let h = if p == 1 {
            bos
        } else {
            let data: Vec<T> = frames[..p - 1].iter().flatten().map(|&v| lit(v)).collect();
            let t = Tensor::from_vec(&[p - 1, self.config.channels], data);
            let flat: Vec<usize> = codes.iter().take(p - 1).flatten().copied().collect();
            let c = (!flat.is_empty()).then_some(flat.as_slice());
            let e = self.embed_long(cx, &t, c)?;
            cx.g.concat_rows(&[bos, e])
        };
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.long.forward_cached(cx, h, &mut session.cache)?;
        for (i, f) in frames.iter().enumerate() {
            session.push(f.clone(), codes.get(i).cloned());
        }
        Ok(())
    }

    /// Same result as [`Backbone::next`], recomputing the whole history.
    pub fn next_uncached<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        frames: &[Vec<f64>],
        codes: &[Vec<usize>],
    ) -> Result<Conditioning> {
        let s = frames.len() + 1;
        let bos = cx.param(self.bos);
        let h = if frames.is_empty() {
            bos
        } else {
            let data: Vec<T> = frames.iter().flatten().map(|&v| lit(v)).collect();
            let t = Tensor::from_vec(&[frames.len(), self.config.channels], data);
            let flat: Vec<usize> = codes.iter().flatten().copied().collect();
            let c = (!flat.is_empty()).then_some(flat.as_slice());
            let p = self.embed_long(cx, &t, c)?;
            cx.g.concat_rows(&[bos, p])
        };
        let out = self.long.forward(cx, h, 1, s);
        let z_long = cx.g.gather_rows(out, &[s - 1]);
        self.finish(cx, z_long, frames)
    }

    fn finish<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        z_long: Var,
        history: &[Vec<f64>],
    ) -> Result<Conditioning> {
        let z_short = self
            .short
            .as_ref()
            .map(|sh| self.short_window(cx, sh, history));
        let z = match z_short {
            Some(zs) => cx.g.add(z_long, zs),
            None => z_long,
        };
        Ok(Conditioning { z_long, z_short, z })
    }
}

/// Incremental decoding state for one generated sequence.
#[derive(Debug, Clone)]
pub struct Session<T> {
    cache: KvCache<T>,
    frames: Vec<Vec<f64>>,
    codes: Vec<Vec<usize>>,
}

impl<T: Scalar> Session<T> {
    /// Append an emitted (clean) frame to the history.
    pub fn push(&mut self, frame: Vec<f64>, codes: Option<Vec<usize>>) {
        self.frames.push(frame);
        if let Some(c) = codes {
            self.codes.push(c);
        }
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn codes(&self) -> &[Vec<usize>] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
