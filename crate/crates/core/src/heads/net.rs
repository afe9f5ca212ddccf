use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, GatedMlp, LayerNorm, Linear, ParamId, ParamStore, TimeEmbedding};
use crate::tensor::{lit, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub channels: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    pub time_frequencies: usize,
    /// Hidden width of the adaptive loss-weight network.
    pub weight_hidden: usize,
}

impl HeadConfig {
    pub fn new(channels: usize, cond_dim: usize, width: usize, blocks: usize) -> Self {
        HeadConfig {
            channels,
            cond_dim,
            width,
            mlp_dim: 2 * width,
            blocks,
            time_frequencies: TimeEmbedding::DEFAULT_FREQUENCIES,
            weight_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.cond_dim == 0
            || self.width == 0
            || self.blocks == 0
            || self.time_frequencies == 0
        {
            return Err(Error::InvalidConfig(
                "head dims and block count must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln: LayerNorm,
    cond: Linear,
    mlp: GatedMlp,
}

/// Residual MLP `F(x_t, t, Z)`. The conditioning `c = silu(W_z Z + W_t phi(t))`
/// is added to the normalized input of every block.
#[derive(Debug, Clone)]
pub struct HeadNet {
    pub config: HeadConfig,
    temb: TimeEmbedding,
    x_in: Linear,
    z_in: Linear,
    t_in: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
    params: Vec<ParamId>,
}

fn collect_new<T: Scalar>(store: &ParamStore<T>, from: usize) -> Vec<ParamId> {
    store.ids().skip(from).collect()
}

impl HeadNet {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: HeadConfig,
    ) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let c = &config;
        let temb = TimeEmbedding::new(c.time_frequencies, 0.25, 8.0);
        let x_in = Linear::new(
            store,
            rng,
            &format!("{name}.x_in"),
            c.channels,
            c.width,
            true,
        );
        let z_in = Linear::new(
            store,
            rng,
            &format!("{name}.z_in"),
            c.cond_dim,
            c.width,
            true,
        );
        let t_in = Linear::new(
            store,
            rng,
            &format!("{name}.t_in"),
            temb.dim(),
            c.width,
            true,
        );
        let blocks = (0..c.blocks)
            .map(|i| Block {
                ln: LayerNorm::new(store, &format!("{name}.blocks.{i}.ln"), c.width),
                cond: Linear::new(
                    store,
                    rng,
                    &format!("{name}.blocks.{i}.cond"),
                    c.width,
                    c.width,
                    true,
                ),
                mlp: GatedMlp::new(
                    store,
                    rng,
                    &format!("{name}.blocks.{i}.mlp"),
                    c.width,
                    c.mlp_dim,
                ),
            })
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), c.width);
        let out = Linear::with_std(
            store,
            rng,
            &format!("{name}.out"),
            c.width,
            c.channels,
            true,
            0.02,
        );
        let params = collect_new(store, first);
        Ok(HeadNet {
            config,
            temb,
            x_in,
            z_in,
            t_in,
            blocks,
            ln_out,
            out,
            params,
        })
    }

    /// Parameters owned by this head.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Projection of `Z` rows; compute once and reuse across noise draws.
    pub fn project_cond<T: Scalar>(&self, cx: &mut Ctx<'_, T>, z: Var) -> Var {
        self.z_in.forward(cx, z)
    }

    /// `F(x_t, t, Z)` with `x_t: [n, C]`, `t: [n, 1]`, `zc: [n, width]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x_t: Var, t: Var, zc: Var) -> Var {
        let e = self.temb.forward(cx.g, t);
        let te = self.t_in.forward(cx, e);
        let c = cx.g.add(zc, te);
        let c = cx.g.silu(c);
        let mut h = self.x_in.forward(cx, x_t);
        for b in &self.blocks {
            let u = b.ln.forward(cx, h);
            let k = b.cond.forward(cx, c);
            let u = cx.g.add(u, k);
            let m = b.mlp.forward(cx, u);
            h = cx.g.add(h, m);
        }
        let h = self.ln_out.forward(cx, h);
        self.out.forward(cx, h)
    }
}

/// Adaptive loss weight `w(t)`: two-layer MLP on the time embedding,
/// clamped to `[-10, 10]`.
#[derive(Debug, Clone)]
pub struct WeightNet {
    temb: TimeEmbedding,
    l1: Linear,
    l2: Linear,
    params: Vec<ParamId>,
}

impl WeightNet {
    pub const CLAMP: f64 = 10.0;

    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        frequencies: usize,
        hidden: usize,
    ) -> Self {
        let first = store.len();
        let temb = TimeEmbedding::new(frequencies, 1.0, 100.0);
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), temb.dim(), hidden, true);
        let l2 = Linear::with_std(store, rng, &format!("{name}.l2"), hidden, 1, true, 0.01);
        WeightNet {
            temb,
            l1,
            l2,
            params: collect_new(store, first),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, t: Var) -> Var {
        let e = self.temb.forward(cx.g, t);
        let h = self.l1.forward(cx, e);
        let h = cx.g.silu(h);
        let w = self.l2.forward(cx, h);
        cx.g.clamp(w, lit(-Self::CLAMP), lit(Self::CLAMP))
    }
}

/// `f = cos(t) x_t - sin(t) F`, rows broadcast against `t: [n, 1]`.
pub(crate) fn trig_combine<T: Scalar>(g: &mut Graph<T>, x_t: Var, t: Var, f: Var) -> Var {
    let c = g.cos(t);
    let s = g.sin(t);
    let a = g.mul(x_t, c);
    let b = g.mul(f, s);
    g.sub(a, b)
}
