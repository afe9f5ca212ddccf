//! Continuous-time consistency head.
//!
//! `f(x_t, t, Z) = cos(t) x_t - sin(t) F(x_t, t, Z)`, so `f(x, 0, Z) = x`.
//! Training minimises, per row,
//! `exp(w(t)) / D * |F - F_teacher - cos(t) df_teacher/dt|^2 - w(t)`
//! where the teacher is a stop-gradient copy and `df/dt` is the total
//! derivative along `x_t` obtained by forward-mode differentiation.

use alloc::vec::Vec;

use super::net::{trig_combine, HeadConfig, HeadNet, WeightNet};
use super::TrigBatch;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ConsistencyHead {
    pub net: HeadNet,
    pub weight: WeightNet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyOptions {
    /// Rescale the tangent term so its per-dimension RMS is at most 1.
    pub clip_tangent: bool,
    /// Use the learned `w(t)`. When off, `w` is held at 0.
    pub adaptive_weight: bool,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions {
            clip_tangent: true,
            adaptive_weight: true,
        }
    }
}

/// Loss node plus diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyTerms {
    pub loss: Var,
    /// Mean squared bracketed residual per dimension, before weighting.
    pub residual: f64,
    pub mean_log_weight: f64,
    /// Mean per-row RMS of `cos(t) df/dt` before clipping.
    pub tangent_rms: f64,
    pub clipped_rows: usize,
}

pub type StudentFn<'f, T> = dyn FnMut(&mut Ctx<'_, T>, Var, Var) -> Var + 'f;
pub type TeacherFn<'f, T> = dyn FnMut(&mut Graph<T>, Var, Var) -> Var + 'f;

/// Core of the objective, independent of the network architecture.
///
/// `student(cx, x_t, t)` returns `F`. When `teacher` is `None` the student
/// subgraph doubles as the teacher: its value is frozen and its tangent
/// supplies `df/dt`, which equals a stop-gradient copy of the current
/// parameters.
pub fn consistency_loss<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    batch: &TrigBatch<T>,
    student: &mut StudentFn<'_, T>,
    teacher: Option<&mut TeacherFn<'_, T>>,
    log_weight: Var,
    opts: ConsistencyOptions,
) -> Result<ConsistencyTerms> {
    let n = batch.rows();
    let d = batch.x0.cols();
    let xt = batch.x_t();
    let dxdt = batch.velocity();
    let tcol = batch.t_column();
    if cx.g.shape(log_weight) != (n, 1) {
        return Err(crate::error::shape_err(
            "log weight",
            (n, 1),
            cx.g.shape(log_weight),
        ));
    }
    let xv = cx.constant(xt.clone());
    let tv = cx.constant(tcol.clone());
    let f_student = student(cx, xv, tv);
    let (f_teacher, df_teacher) = match teacher {
        None => {
            let tan =
                cx.g.tangents(&[(xv, dxdt.clone()), (tv, Tensor::full(&[n, 1], T::one()))])?;
            let dt = tan
                .get(f_student)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[n, d]));
            (cx.g.value(f_student).clone(), dt)
        }
        Some(tf) => {
            let x2 = cx.constant(xt.clone());
            let t2 = cx.constant(tcol);
            let ft = tf(cx.g, x2, t2);
            let tan =
                cx.g.tangents(&[(x2, dxdt.clone()), (t2, Tensor::full(&[n, 1], T::one()))])?;
            let dt = tan
                .get(ft)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[n, d]));
            (cx.g.value(ft).clone(), dt)
        }
    };
    if !df_teacher.all_finite() {
        return Err(Error::NonFinite {
            op: "consistency_tangent",
            node: f_student.index(),
        });
    }
    let mut target = Vec::with_capacity(n * d);
    let mut rms_sum = 0.0;
    let mut clipped = 0;
    for r in 0..n {
        let t = batch.t[r];
        let (s, c) = (libm::sin(t), libm::cos(t));
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let dfdt = -s * xt.get(r, j).to_f64_lossy() + c * dxdt.get(r, j).to_f64_lossy()
                    - c * f_teacher.get(r, j).to_f64_lossy()
                    - s * df_teacher.get(r, j).to_f64_lossy();
                c * dfdt
            })
            .collect();
        let rms = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() / d as f64);
        rms_sum += rms;
        let scale = if opts.clip_tangent && rms > 1.0 {
            clipped += 1;
            1.0 / rms
        } else {
            1.0
        };
        for (j, g) in row.into_iter().enumerate() {
            target.push(lit::<T>(f_teacher.get(r, j).to_f64_lossy() + scale * g));
        }
    }
    let target = cx.constant(Tensor::from_vec(&[n, d], target));
    let log_weight = if opts.adaptive_weight {
        log_weight
    } else {
        cx.constant(Tensor::zeros(&[n, 1]))
    };
    let resid = cx.g.sub(f_student, target);
    let sq = cx.g.square(resid);
    let ss = cx.g.sum_cols(sq);
    let residual = cx.g.value(ss).sum().to_f64_lossy() / (n * d) as f64;
    let ew = cx.g.exp(log_weight);
    let weighted = cx.g.mul(ss, ew);
    let weighted = cx.g.scale(weighted, lit(1.0 / d as f64));
    let per_row = cx.g.sub(weighted, log_weight);
    let loss = cx.g.mean(per_row);
    let mean_log_weight = cx.g.value(log_weight).sum().to_f64_lossy() / n as f64;
    Ok(ConsistencyTerms {
        loss,
        residual,
        mean_log_weight,
        tangent_rms: rms_sum / n as f64,
        clipped_rows: clipped,
    })
}

impl ConsistencyHead {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: HeadConfig,
    ) -> Result<Self> {
        let freqs = config.time_frequencies;
        let hidden = config.weight_hidden;
        let net = HeadNet::new(store, rng, "head.consistency", config)?;
        let weight = WeightNet::new(store, rng, "head.weight", freqs, hidden);
        Ok(ConsistencyHead { net, weight })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net
            .params()
            .iter()
            .chain(self.weight.params())
            .copied()
            .collect()
    }

    /// `f(x_t, t, Z)` on graph nodes; `zc` from [`HeadNet::project_cond`].
    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x_t: Var, t: Var, zc: Var) -> Var {
        let f = self.net.forward(cx, x_t, t, zc);
        trig_combine(cx.g, x_t, t, f)
    }

    /// Objective for rows of `batch` with projected conditioning `zc`.
    /// `teacher` supplies frozen parameters (e.g. an EMA copy) and the raw
    /// conditioning rows it should project.
    pub fn loss<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        batch: &TrigBatch<T>,
        zc: Var,
        teacher: Option<(&ParamStore<T>, Var)>,
        opts: ConsistencyOptions,
    ) -> Result<ConsistencyTerms> {
        let tv = cx.constant(batch.t_column());
        let w = self.weight.forward(cx, tv);
        let net = &self.net;
        let mut student = |cx: &mut Ctx<'_, T>, x: Var, t: Var| net.forward(cx, x, t, zc);
        match teacher {
            None => consistency_loss(cx, batch, &mut student, None, w, opts),
            Some((store, z)) => {
                let mut tf = |g: &mut Graph<T>, x: Var, t: Var| {
                    let zs = g.stop_gradient(z);
                    let mut tcx = Ctx::new(g, store, false);
                    let zc = net.project_cond(&mut tcx, zs);
                    net.forward(&mut tcx, x, t, zc)
                };
                consistency_loss(cx, batch, &mut student, Some(&mut tf), w, opts)
            }
        }
    }
}
