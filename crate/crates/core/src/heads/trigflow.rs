//! Flow-matching head on the trigonometric schedule. `F` regresses the
//! velocity `-sin(t) x_0 + cos(t) eps` and sampling integrates
//! `dx/dt = F(x, t, Z)` from `t = pi/2` to `0`.

use alloc::vec::Vec;

use super::net::{HeadConfig, HeadNet};
use super::TrigBatch;
use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct TrigFlowHead {
    pub net: HeadNet,
}

impl TrigFlowHead {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: HeadConfig,
    ) -> Result<Self> {
        Ok(TrigFlowHead {
            net: HeadNet::new(store, rng, "head.trigflow", config)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params().to_vec()
    }

    /// Mean squared error per element against the exact velocity.
    pub fn loss<T: Scalar>(&self, cx: &mut Ctx<'_, T>, batch: &TrigBatch<T>, zc: Var) -> Var {
        let x = cx.constant(batch.x_t());
        let t = cx.constant(batch.t_column());
        let f = self.net.forward(cx, x, t, zc);
        let v = cx.constant(batch.velocity());
        let d = cx.g.sub(f, v);
        let sq = cx.g.square(d);
        cx.g.mean(sq)
    }
}
