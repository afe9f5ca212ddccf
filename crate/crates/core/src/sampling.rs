//! Autoregressive generation with per-stage timing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads::consistency::ConsistencyHead;
use crate::heads::rq::RqHead;
use crate::heads::trigflow::TrigFlowHead;
use crate::heads::{HeadKind, T_MAX};
use crate::model::{Head, Model};
use crate::nn::Ctx;
use crate::rng;
use crate::source::{LatentSequence, NormStats};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub head: HeadKind,
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Total length including the prompt.
    pub max_frames: usize,
    /// Permit sampling from a head that still has its initial parameters.
    pub allow_untrained: bool,
}

impl SamplerConfig {
    pub fn new(
        head: HeadKind,
        steps: usize,
        temperature: f64,
        seed: u64,
        max_frames: usize,
    ) -> Self {
        SamplerConfig {
            head,
            steps,
            temperature,
            seed,
            max_frames,
            allow_untrained: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig(
                "sampler needs at least one step".into(),
            ));
        }
        if self.steps == 1 && self.head == HeadKind::TrigFlow {
            return Err(Error::InvalidConfig(
                "a single step is only meaningful for the consistency head".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Standard deviation multiplier `tau^{-1/4}`, i.e. variance `1/sqrt(tau)`.
pub fn temperature_scale(tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::OutOfRange(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok(libm::pow(tau, -0.25))
}

/// `count` draws of `eps * tau^{-1/4}`, `eps ~ N(0, 1)`.
pub fn gaussian_temperature_noise<R: rand::Rng + ?Sized>(
    count: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = temperature_scale(tau)?;
    Ok((0..count).map(|_| s * rng::normal(rng)).collect())
}

fn noise_tensor<T: Scalar, R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let v = gaussian_temperature_noise(rows * cols, tau, rng)?;
    Ok(Tensor::from_vec(
        &[rows, cols],
        v.into_iter().map(lit).collect(),
    ))
}

/// Decreasing times `pi/2 = t_1 > ... > t_n > 0`, uniformly spaced.
pub fn consistency_grid(steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| T_MAX * (steps - i) as f64 / steps as f64)
        .collect()
}

fn t_col<T: Scalar>(cx: &mut Ctx<'_, T>, rows: usize, t: f64) -> Var {
    cx.constant(Tensor::full(&[rows, 1], lit(t)))
}

/// Consistency sampling for every row of `z`. One step evaluates
/// `f(eps_tau, pi/2, Z)`; more steps alternate prediction and re-noising.
pub fn sample_consistency<T: Scalar, R: rand::Rng + ?Sized>(
    cx: &mut Ctx<'_, T>,
    head: &ConsistencyHead,
    z: Var,
    steps: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "consistency sampling needs at least one step".into(),
        ));
    }
    let rows = cx.g.shape(z).0;
    let c = head.net.config.channels;
    let zc = head.net.project_cond(cx, z);
    let grid = consistency_grid(steps);
    let mut x = noise_tensor::<T, _>(rows, c, tau, rng)?;
    let mut xhat = x.clone();
    for (i, &t) in grid.iter().enumerate() {
        let xv = cx.constant(x.clone());
        let tv = t_col(cx, rows, t);
        let f = head.apply(cx, xv, tv, zc);
        xhat = cx.g.value(f).clone();
        if let Some(&next) = grid.get(i + 1) {
            let e = noise_tensor::<T, _>(rows, c, tau, rng)?;
            let (a, b): (T, T) = (lit(libm::cos(next)), lit(libm::sin(next)));
            x = xhat.zip_map(&e, |u, v| a * u + b * v);
        }
    }
    Ok(xhat)
}

/// Forward Euler on `dx/dt = F(x, t, Z)` from `pi/2` down to `0`.
pub fn sample_trigflow<T: Scalar, R: rand::Rng + ?Sized>(
    cx: &mut Ctx<'_, T>,
    head: &TrigFlowHead,
    z: Var,
    steps: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "ODE sampling needs at least one step".into(),
        ));
    }
    let rows = cx.g.shape(z).0;
    let c = head.net.config.channels;
    let zc = head.net.project_cond(cx, z);
    let mut x = noise_tensor::<T, _>(rows, c, tau, rng)?;
    let h = T_MAX / steps as f64;
    let hs: T = lit(h);
    for i in 0..steps {
        let t = T_MAX - i as f64 * h;
        let xv = cx.constant(x.clone());
        let tv = t_col(cx, rows, t);
        let f = head.net.forward(cx, xv, tv, zc);
        x = x.zip_map(cx.g.value(f), |a, b| a - hs * b);
    }
    Ok(x)
}

/// Codes for every row of `z`, level by level.
pub fn sample_rq<T: Scalar, R: rand::Rng + ?Sized>(
    cx: &mut Ctx<'_, T>,
    head: &RqHead,
    z: Var,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let rows = cx.g.shape(z).0;
    (0..rows)
        .map(|r| {
            let zr = if rows == 1 {
                z
            } else {
                cx.g.gather_rows(z, &[r])
            };
            head.sample(cx, zr, tau, rng)
        })
        .collect()
}

/// Frames (normalized) and, for the discrete head, their codes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample<T> {
    pub frames: Tensor<T>,
    pub codes: Option<Vec<Vec<usize>>>,
}

pub fn check_ready<T: Scalar>(model: &Model<T>, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if model.head.kind() != cfg.head {
        return Err(Error::InvalidConfig(format!(
            "sampler configured for {} but model has a {} head",
            cfg.head.name(),
            model.head.kind().name()
        )));
    }
    if !cfg.allow_untrained && !model.head_trained() {
        return Err(Error::UntrainedHead);
    }
    Ok(())
}

/// Draw one next frame per row of `z` from the model's head.
pub fn sample_head<T: Scalar, R: rand::Rng + ?Sized>(
    cx: &mut Ctx<'_, T>,
    model: &Model<T>,
    z: Var,
    steps: usize,
    tau: f64,
    rng: &mut R,
) -> Result<HeadSample<T>> {
    match &model.head {
        Head::Consistency(h) => Ok(HeadSample {
            frames: sample_consistency(cx, h, z, steps, tau, rng)?,
            codes: None,
        }),
        Head::TrigFlow(h) => Ok(HeadSample {
            frames: sample_trigflow(cx, h, z, steps, tau, rng)?,
            codes: None,
        }),
        Head::Rq(h) => {
            let codes = sample_rq(cx, h, z, tau, rng)?;
            let books = model.require_codebooks()?;
            let mut data = Vec::with_capacity(codes.len() * books.dim);
            for c in &codes {
                data.extend(books.decode(c)?.into_iter().map(lit::<T>));
            }
            Ok(HeadSample {
                frames: Tensor::from_vec(&[codes.len(), books.dim], data),
                codes: Some(codes),
            })
        }
    }
}

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Deterministic clock advancing by a fixed tick per reading.
#[derive(Debug, Default)]
pub struct TickClock {
    ticks: core::cell::Cell<u64>,
    pub tick: f64,
}

impl TickClock {
    pub fn new(tick: f64) -> Self {
        TickClock {
            ticks: core::cell::Cell::new(0),
            tick,
        }
    }
}

impl Clock for TickClock {
    fn now(&self) -> f64 {
        let n = self.ticks.get();
        self.ticks.set(n + 1);
        n as f64 * self.tick
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameTiming {
    pub backbone: f64,
    pub head: f64,
    pub other: f64,
}

impl FrameTiming {
    pub fn total(&self) -> f64 {
        self.backbone + self.head + self.other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// Continuation only (the prompt is excluded).
    pub frames: LatentSequence,
    pub timings: Vec<FrameTiming>,
    /// Wall time of the whole call, prompt processing included.
    pub wall: f64,
    pub prompt_time: f64,
    /// Frames appended to the backbone history, in normalized space.
    pub history: Vec<Vec<f64>>,
}

impl GenerationTrace {
    pub fn stage_totals(&self) -> FrameTiming {
        let mut t = FrameTiming::default();
        for f in &self.timings {
            t.backbone += f.backbone;
            t.head += f.head;
            t.other += f.other;
        }
        t.other += self.prompt_time;
        t
    }

    /// Fraction of wall time spent in the sampler head.
    pub fn head_share(&self) -> f64 {
        let t = self.stage_totals();
        t.head / t.total()
    }

    /// Generated seconds per wall second.
    pub fn rtf(&self) -> f64 {
        self.frames.duration() / self.wall
    }
}

fn prepare_prompt<T: Scalar>(
    model: &Model<T>,
    prompt: &LatentSequence,
    stats: Option<&NormStats>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    if prompt.channels != model.channels() {
        return Err(crate::error::shape_err(
            "prompt channels",
            model.channels(),
            prompt.channels,
        ));
    }
    let norm = match stats {
        Some(s) => s.normalize(prompt)?,
        None => prompt.clone(),
    };
    let mut frames = Vec::with_capacity(norm.len());
    let mut codes = Vec::new();
    for s in 0..norm.len() {
        let f = norm.frame(s).to_vec();
        if model.head.kind() == HeadKind::Rq {
            let e = model.require_codebooks()?.encode(&f)?;
            frames.push(e.quantized);
            codes.push(e.codes);
        } else {
            frames.push(f);
        }
    }
    Ok((frames, codes))
}

/// Continue `prompt` up to `cfg.max_frames` frames. With `stats`, the prompt
/// is normalized on the way in and the output denormalized on the way out.
/// Emitted frames are fed back clean.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &LatentSequence,
    cfg: &SamplerConfig,
    stats: Option<&NormStats>,
    clock: &dyn Clock,
) -> Result<GenerationTrace> {
    generate_impl(model, prompt, cfg, stats, clock, true)
}

/// Reference loop that recomputes the full history every frame.
pub fn generate_uncached<T: Scalar>(
    model: &Model<T>,
    prompt: &LatentSequence,
    cfg: &SamplerConfig,
    stats: Option<&NormStats>,
    clock: &dyn Clock,
) -> Result<GenerationTrace> {
    generate_impl(model, prompt, cfg, stats, clock, false)
}

fn generate_impl<T: Scalar>(
    model: &Model<T>,
    prompt: &LatentSequence,
    cfg: &SamplerConfig,
    stats: Option<&NormStats>,
    clock: &dyn Clock,
    cached: bool,
) -> Result<GenerationTrace> {
    check_ready(model, cfg)?;
    if prompt.len() > cfg.max_frames {
        return Err(Error::OutOfRange(format!(
            "prompt of {} frames exceeds max_frames {}",
            prompt.len(),
            cfg.max_frames
        )));
    }
    let start = clock.now();
    let c = model.channels();
    let (pframes, pcodes) = prepare_prompt(model, prompt, stats)?;
    let mut r = rng::stream(cfg.seed, 5);
    let mut session = model.backbone.new_session::<T>();
    let mut frames = pframes.clone();
    let mut codes = pcodes.clone();
    if cached {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.store, false);
        model
            .backbone
            .prefill(&mut cx, &mut session, &pframes, &pcodes)?;
    }
    let mut out = LatentSequence::empty(c, prompt.frame_rate);
    let mut timings = Vec::with_capacity(cfg.max_frames - prompt.len());
    for _ in prompt.len()..cfg.max_frames {
        let t0 = clock.now();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.store, false);
        let cond = if cached {
            model.backbone.next(&mut cx, &mut session)?
        } else {
            model.backbone.next_uncached(&mut cx, &frames, &codes)?
        };
        let t1 = clock.now();
        let s = sample_head(&mut cx, model, cond.z, cfg.steps, cfg.temperature, &mut r)?;
        let t2 = clock.now();
        let frame: Vec<f64> = s.frames.row(0).iter().map(|v| v.to_f64_lossy()).collect();
        if !frame.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "sample_head",
                node: 0,
            });
        }
        let fc = s.codes.map(|mut v| v.swap_remove(0));
        if cached {
            session.push(frame.clone(), fc.clone());
        }
        if let Some(q) = fc {
            codes.push(q);
        }
        let emitted = match stats {
            Some(st) => {
                st.denormalize(&LatentSequence::new(frame.clone(), c, prompt.frame_rate)?)?
                    .frames
            }
            None => frame.clone(),
        };
        out.push(&emitted);
        frames.push(frame);
        drop(g);
        let t3 = clock.now();
        timings.push(FrameTiming {
            backbone: t1 - t0,
            head: t2 - t1,
            other: t3 - t2,
        });
    }
    let end = clock.now();
    let history = frames;
    let wall = end - start;
    let per_frame: f64 = timings.iter().map(FrameTiming::total).sum();
    Ok(GenerationTrace {
        frames: out,
        timings,
        wall,
        prompt_time: wall - per_frame,
        history,
    })
}

/// Samples of the frame following `history` (normalized space), `count`
/// rows drawn in one batched head call.
pub fn sample_next_frames<T: Scalar>(
    model: &Model<T>,
    history: &LatentSequence,
    steps: usize,
    tau: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (frames, codes) = prepare_prompt(model, history, None)?;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &model.store, false);
    let cond = model.backbone.next_uncached(&mut cx, &frames, &codes)?;
    let idx = vec![0usize; count];
    let z = cx.g.gather_rows(cond.z, &idx);
    let mut r = rng::stream(seed, 6);
    let s = sample_head(&mut cx, model, z, steps, tau, &mut r)?;
    Ok((0..count)
        .map(|i| s.frames.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect())
}
