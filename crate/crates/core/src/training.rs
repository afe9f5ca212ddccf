//! Training steps for the continuous heads (with the head batch multiplier)
//! and for the discrete RQ baseline.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::backbone::{BatchInput, NoiseDraw, Taps};
use crate::error::{Error, Result};
use crate::heads::consistency::ConsistencyOptions;
use crate::heads::{HeadKind, TrigBatch};
use crate::model::{Head, Model};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{default_warmup, lr_at, AdamConfig, AdamW};
use crate::rng;
use crate::source::LatentSequence;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Independent `(t, eps)` draws per backbone forward.
    pub head_batch: usize,
    pub lr: f64,
    pub total_steps: u64,
    /// Defaults to 5% of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Teacher EMA decay; `None` uses the stop-gradient current parameters.
    pub ema_decay: Option<f64>,
    pub consistency: ConsistencyOptions,
    pub record_taps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            head_batch: 8,
            lr: 1e-3,
            total_steps: 20_000,
            warmup_steps: None,
            adam: AdamConfig::default(),
            seed: 0,
            ema_decay: None,
            consistency: ConsistencyOptions::default(),
            record_taps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_batch == 0 {
            return Err(Error::InvalidConfig(
                "head batch multiplier must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidConfig(format!(
                    "ema decay {d} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| default_warmup(self.total_steps))
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.lr, self.warmup(), self.total_steps)
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub ema: Option<ParamStore<T>>,
    pub stats: RunningStats,
    pub skipped: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&model.store, cfg.adam);
        let ema = cfg.ema_decay.map(|_| model.store.clone());
        TrainState {
            step: 0,
            model,
            opt,
            ema,
            stats: RunningStats::default(),
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepReport<T> {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Sequences pushed through the long transformer during this step.
    pub backbone_forwards: u64,
    /// Diffusion times drawn for the head, `N * batch * len` of them.
    pub head_times: Vec<f64>,
    pub taps: Option<Taps<T>>,
}

/// Stack equal-length sequences into `[batch * len, C]`.
pub fn stack_batch<T: Scalar>(batch: &[LatentSequence]) -> Result<(Tensor<T>, usize)> {
    let first = batch
        .first()
        .ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
    let (s, c) = (first.len(), first.channels);
    if s == 0 {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    let mut data = Vec::with_capacity(batch.len() * s * c);
    for q in batch {
        if q.len() != s || q.channels != c {
            return Err(crate::error::shape_err(
                "batch sequence",
                (s, c),
                (q.len(), q.channels),
            ));
        }
        data.extend(q.frames.iter().map(|&v| lit::<T>(v)));
    }
    Ok((Tensor::from_vec(&[batch.len() * s, c], data), s))
}

/// Indices of the sequences that make up the batch at `step`.
pub fn batch_indices(corpus_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut r = rng::stream(rng::mix(seed, step), 2);
    (0..batch_size)
        .map(|_| (rng::uniform(&mut r) * corpus_len as f64) as usize % corpus_len.max(1))
        .collect()
}

fn tile<T: Scalar>(t: &Tensor<T>, times: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[t.rows() * times, t.cols()], data)
}

struct Objective<T> {
    loss: Var,
    taps: Taps<T>,
    head_times: Vec<f64>,
}

/// Continuous-head objective: one backbone forward, `draws` head draws.
#[allow(clippy::too_many_arguments)]
fn calm_objective<T: Scalar, R: rand::Rng + ?Sized>(
    model: &Model<T>,
    cx: &mut Ctx<'_, T>,
    frames: &Tensor<T>,
    batch: usize,
    len: usize,
    draws: usize,
    rng: &mut R,
    noise: Option<&NoiseDraw>,
    teacher: Option<&ParamStore<T>>,
    opts: ConsistencyOptions,
) -> Result<Objective<T>> {
    let rows = batch * len;
    let own;
    let noise = match noise {
        Some(n) => Some(n),
        None if model.backbone.config.noise_injection => {
            own = NoiseDraw::sample(rows, model.channels(), rng);
            Some(&own)
        }
        None => None,
    };
    let inp = BatchInput {
        frames,
        codes: None,
        batch,
        len,
    };
    let (cond, taps) = model.backbone.forward_train(cx, &inp, noise)?;
    let rep: Vec<usize> = (0..draws).flat_map(|_| 0..rows).collect();
    let x0 = if draws == 1 {
        frames.clone()
    } else {
        tile(frames, draws)
    };
    let tb = TrigBatch::sample(x0, rng);
    let head_times = tb.t.clone();
    let loss = match &model.head {
        Head::Consistency(h) => {
            let zc = h.net.project_cond(cx, cond.z);
            let zc = if draws == 1 {
                zc
            } else {
                cx.g.gather_rows(zc, &rep)
            };
            let teacher = match teacher {
                Some(st) => {
                    let z = if draws == 1 {
                        cond.z
                    } else {
                        cx.g.gather_rows(cond.z, &rep)
                    };
                    Some((st, z))
                }
                None => None,
            };
            h.loss(cx, &tb, zc, teacher, opts)?.loss
        }
        Head::TrigFlow(h) => {
            let zc = h.net.project_cond(cx, cond.z);
            let zc = if draws == 1 {
                zc
            } else {
                cx.g.gather_rows(zc, &rep)
            };
            h.loss(cx, &tb, zc)
        }
        Head::Rq(_) => {
            return Err(Error::InvalidConfig(
                "use rq_train_step for the discrete head".into(),
            ))
        }
    };
    Ok(Objective {
        loss,
        taps,
        head_times,
    })
}

/// Quantize normalized frames: `(dequantized frames, codes)`.
pub fn quantize_batch<T: Scalar>(
    model: &Model<T>,
    frames: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let books = model.require_codebooks()?;
    let mut deq = Vec::with_capacity(frames.len());
    let mut codes = Vec::with_capacity(frames.rows() * books.levels());
    for r in 0..frames.rows() {
        let x: Vec<f64> = frames.row(r).iter().map(|v| v.to_f64_lossy()).collect();
        let e = books.encode(&x)?;
        deq.extend(e.quantized.iter().map(|&v| lit::<T>(v)));
        codes.extend(e.codes);
    }
    Ok((Tensor::from_vec(frames.shape(), deq), codes))
}

fn rq_objective<T: Scalar>(
    model: &Model<T>,
    cx: &mut Ctx<'_, T>,
    frames: &Tensor<T>,
    batch: usize,
    len: usize,
) -> Result<Objective<T>> {
    let Head::Rq(head) = &model.head else {
        return Err(Error::InvalidConfig(
            "rq objective needs the discrete head".into(),
        ));
    };
    let (deq, codes) = quantize_batch(model, frames)?;
    let inp = BatchInput {
        frames: &deq,
        codes: Some(&codes),
        batch,
        len,
    };
    let (cond, taps) = model.backbone.forward_train(cx, &inp, None)?;
    let loss = head.loss(cx, cond.z, &codes)?;
    Ok(Objective {
        loss,
        taps,
        head_times: Vec::new(),
    })
}

fn finish_step<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    g: Graph<T>,
    bind: crate::nn::Bindings,
    obj: Objective<T>,
    forwards_before: u64,
) -> Result<StepReport<T>> {
    let step = state.step;
    state.step += 1;
    let lr = cfg.lr_at(step);
    let loss = g.value(obj.loss).data()[0].to_f64_lossy();
    let forwards = state.model.backbone.forward_count() - forwards_before;
    let mut report = StepReport {
        step,
        loss,
        lr,
        grad_norm: 0.0,
        skipped: false,
        backbone_forwards: forwards,
        head_times: obj.head_times,
        taps: cfg.record_taps.then_some(obj.taps),
    };
    let grads = match g.backward(obj.loss) {
        Ok(gr) if loss.is_finite() => gr,
        Ok(_) | Err(Error::NonFinite { .. }) => {
            state.skipped += 1;
            report.skipped = true;
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let gs = bind.gradients(&grads, &state.model.store);
    match state.opt.step(&mut state.model.store, &gs, lr) {
        Ok(st) => report.grad_norm = st.grad_norm,
        Err(Error::NonFinite { .. }) => {
            state.skipped += 1;
            report.skipped = true;
            return Ok(report);
        }
        Err(e) => return Err(e),
    }
    if let (Some(ema), Some(d)) = (state.ema.as_mut(), cfg.ema_decay) {
        let dd: T = lit(d);
        let od: T = lit(1.0 - d);
        for (e, p) in ema
            .tensors_mut()
            .iter_mut()
            .zip(state.model.store.tensors())
        {
            for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                *a = dd * *a + od * b;
            }
        }
    }
    state.stats.push(loss);
    Ok(report)
}

/// One update of backbone and continuous head on a batch of normalized
/// sequences. Randomness is derived from `(cfg.seed, state.step)`.
pub fn calm_train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[LatentSequence],
    cfg: &TrainConfig,
) -> Result<StepReport<T>> {
    cfg.validate()?;
    let (frames, len) = stack_batch::<T>(batch)?;
    let mut r = rng::stream(rng::mix(cfg.seed, state.step), 1);
    let before = state.model.backbone.forward_count();
    let mut g = Graph::new();
    let (obj, bind) = {
        let mut cx = Ctx::new(&mut g, &state.model.store, true);
        let obj = calm_objective(
            &state.model,
            &mut cx,
            &frames,
            batch.len(),
            len,
            cfg.head_batch,
            &mut r,
            None,
            state.ema.as_ref(),
            cfg.consistency,
        );
        match obj {
            Ok(o) => (o, cx.into_bindings()),
            Err(Error::NonFinite { .. }) => {
                state.step += 1;
                state.skipped += 1;
                return Ok(StepReport {
                    step: state.step - 1,
                    loss: f64::NAN,
                    lr: cfg.lr_at(state.step - 1),
                    grad_norm: 0.0,
                    skipped: true,
                    backbone_forwards: state.model.backbone.forward_count() - before,
                    head_times: Vec::new(),
                    taps: None,
                });
            }
            Err(e) => return Err(e),
        }
    };
    finish_step(state, cfg, g, bind, obj, before)
}

/// One joint update of backbone and RQ head; codes come from the model's
/// frozen codebooks.
pub fn rq_train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[LatentSequence],
    cfg: &TrainConfig,
) -> Result<StepReport<T>> {
    cfg.validate()?;
    let (frames, len) = stack_batch::<T>(batch)?;
    let before = state.model.backbone.forward_count();
    let mut g = Graph::new();
    let (obj, bind) = {
        let mut cx = Ctx::new(&mut g, &state.model.store, true);
        let obj = rq_objective(&state.model, &mut cx, &frames, batch.len(), len)?;
        (obj, cx.into_bindings())
    };
    finish_step(state, cfg, g, bind, obj, before)
}

/// Dispatch on the model's head kind.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[LatentSequence],
    cfg: &TrainConfig,
) -> Result<StepReport<T>> {
    match state.model.head.kind() {
        HeadKind::Rq => rq_train_step(state, batch, cfg),
        _ => calm_train_step(state, batch, cfg),
    }
}

/// Loss estimate on frozen parameters. `noise` pins the backbone's
/// noise-injection draw; head draws come from `seed`.
pub fn loss_probe<T: Scalar>(
    model: &Model<T>,
    batch: &[LatentSequence],
    draws: usize,
    seed: u64,
    noise: Option<&NoiseDraw>,
    opts: ConsistencyOptions,
) -> Result<f64> {
    let (frames, len) = stack_batch::<T>(batch)?;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &model.store, false);
    let mut r = rng::stream(seed, 1);
    let obj = match model.head.kind() {
        HeadKind::Rq => rq_objective(model, &mut cx, &frames, batch.len(), len)?,
        _ => calm_objective(
            model,
            &mut cx,
            &frames,
            batch.len(),
            len,
            draws,
            &mut r,
            noise,
            None,
            opts,
        )?,
    };
    Ok(g.value(obj.loss).data()[0].to_f64_lossy())
}

/// Convenience loop: `steps` updates drawing batches from `corpus`.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    corpus: &[LatentSequence],
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&StepReport<T>),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    for _ in 0..steps {
        let idx = batch_indices(corpus.len(), cfg.batch_size, cfg.seed, state.step);
        let batch: Vec<LatentSequence> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let rep = train_step(state, &batch, cfg)?;
        on_step(&rep);
    }
    Ok(())
}
