//! Next-frame samplers conditioned on `Z`: a consistency head, a
//! flow-matching (TrigFlow) head and a residual-quantized discrete head.

pub mod consistency;
mod net;
pub mod rq;
pub mod trigflow;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{lit, Scalar, Tensor};

pub use net::{HeadConfig, HeadNet, WeightNet};

/// Terminal time of the trigonometric schedule.
pub const T_MAX: f64 = core::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Consistency,
    TrigFlow,
    Rq,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Consistency => "consistency",
            HeadKind::TrigFlow => "trigflow",
            HeadKind::Rq => "rq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(HeadKind::Consistency),
            "trigflow" => Ok(HeadKind::TrigFlow),
            "rq" => Ok(HeadKind::Rq),
            other => Err(Error::InvalidConfig(format!("unknown head kind `{other}`"))),
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(-1e-12..=T_MAX + 1e-12).contains(&t) {
        return Err(Error::OutOfRange(format!("time {t} outside [0, pi/2]")));
    }
    Ok(())
}

/// Rows of `(x_0, eps, t)` with `x_t = cos(t) x_0 + sin(t) eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigBatch<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<f64>,
}

impl<T: Scalar> TrigBatch<T> {
    pub fn new(x0: Tensor<T>, eps: Tensor<T>, t: Vec<f64>) -> Result<Self> {
        if x0.shape() != eps.shape() || t.len() != x0.rows() {
            return Err(crate::error::shape_err(
                "trig batch",
                x0.shape().to_vec(),
                eps.shape().to_vec(),
            ));
        }
        for &v in &t {
            check_time(v)?;
        }
        Ok(TrigBatch { x0, eps, t })
    }

    /// Fresh `eps ~ N(0, I)` and `t = (pi/2) u`, `u ~ U(0, 1)` per row.
    pub fn sample<R: rand::Rng + ?Sized>(x0: Tensor<T>, rng: &mut R) -> Self {
        let t = (0..x0.rows()).map(|_| T_MAX * rng::uniform(rng)).collect();
        let eps = Tensor::from_vec(
            x0.shape(),
            (0..x0.len()).map(|_| lit(rng::normal(rng))).collect(),
        );
        TrigBatch { x0, eps, t }
    }

    pub fn rows(&self) -> usize {
        self.x0.rows()
    }

    fn combine(&self, a: impl Fn(f64) -> f64, b: impl Fn(f64) -> f64) -> Tensor<T> {
        let c = self.x0.cols();
        let mut out = Vec::with_capacity(self.x0.len());
        for r in 0..self.rows() {
            let (ca, cb): (T, T) = (lit(a(self.t[r])), lit(b(self.t[r])));
            for j in 0..c {
                out.push(ca * self.x0.get(r, j) + cb * self.eps.get(r, j));
            }
        }
        Tensor::from_vec(self.x0.shape(), out)
    }

    pub fn x_t(&self) -> Tensor<T> {
        self.combine(libm::cos, libm::sin)
    }

    /// `dx_t/dt = -sin(t) x_0 + cos(t) eps`, also the flow-matching target.
    pub fn velocity(&self) -> Tensor<T> {
        self.combine(|t| -libm::sin(t), libm::cos)
    }

    pub fn t_column(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.rows(), 1], self.t.iter().map(|&v| lit(v)).collect())
    }
}
