//! Residual-quantized discrete head. Level-1 logits are a linear map of `Z`;
//! deeper levels come from a small causal transformer over the depth
//! sequence `[P(Z), E_1(q^1), ..., E_{K-1}(q^{K-1})]`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Embedding, Linear, ParamId, ParamStore, Positional, Transformer};
use crate::rng;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RqConfig {
    pub cond_dim: usize,
    pub sizes: Vec<usize>,
    pub width: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl RqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "rq head needs non-empty codebooks".into(),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "rq width must split across heads".into(),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone)]
pub struct RqHead {
    pub config: RqConfig,
    first: Linear,
    z_proj: Linear,
    emb: Vec<Embedding>,
    pos: Embedding,
    depth: Transformer,
    outs: Vec<Linear>,
    params: Vec<ParamId>,
}

/// Per-level logits for a batch of frames.
#[derive(Debug, Clone)]
pub struct RqLogits {
    pub levels: Vec<Var>,
}

impl RqHead {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: RqConfig,
    ) -> Result<Self> {
        config.validate()?;
        let start = store.len();
        let c = &config;
        let k = c.levels();
        let first = Linear::with_std(
            store,
            rng,
            "head.rq.first",
            c.cond_dim,
            c.sizes[0],
            true,
            0.02,
        );
        let z_proj = Linear::new(store, rng, "head.rq.z_proj", c.cond_dim, c.width, true);
        let emb = (0..k - 1)
            .map(|l| {
                Embedding::new(
                    store,
                    rng,
                    &format!("head.rq.emb.{l}"),
                    c.sizes[l],
                    c.width,
                    1.0 / libm::sqrt(c.width as f64),
                )
            })
            .collect();
        let pos = Embedding::new(store, rng, "head.rq.pos", k, c.width, 0.02);
        let depth = Transformer::new(
            store,
            rng,
            "head.rq.depth",
            c.layers,
            c.width,
            c.mlp_dim,
            c.heads,
            Positional::External,
        );
        let outs = (1..k)
            .map(|l| {
                Linear::with_std(
                    store,
                    rng,
                    &format!("head.rq.out.{l}"),
                    c.width,
                    c.sizes[l],
                    true,
                    0.02,
                )
            })
            .collect();
        let params = store.ids().skip(start).collect();
        Ok(RqHead {
            config,
            first,
            z_proj,
            emb,
            pos,
            depth,
            outs,
            params,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    fn check_codes(&self, codes: &[usize], rows: usize) -> Result<()> {
        let k = self.config.levels();
        if codes.len() != rows * k {
            return Err(crate::error::shape_err("rq codes", rows * k, codes.len()));
        }
        for (i, &q) in codes.iter().enumerate() {
            let n = self.config.sizes[i % k];
            if q >= n {
                return Err(Error::OutOfRange(format!(
                    "code {q} at level {} exceeds {n}",
                    i % k
                )));
            }
        }
        Ok(())
    }

    /// Teacher-forced logits; `codes` is `[rows * K]`, frame-major.
    pub fn logits<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        z: Var,
        codes: &[usize],
    ) -> Result<RqLogits> {
        let n = cx.g.shape(z).0;
        self.check_codes(codes, n)?;
        let k = self.config.levels();
        let mut levels = Vec::with_capacity(k);
        levels.push(self.first.forward(cx, z));
        if k == 1 {
            return Ok(RqLogits { levels });
        }
        let mut parts = Vec::with_capacity(k);
        parts.push(self.z_proj.forward(cx, z));
        for (l, e) in self.emb.iter().enumerate() {
            let idx: Vec<usize> = (0..n).map(|r| codes[r * k + l]).collect();
            parts.push(e.forward(cx, &idx));
        }
        let table = cx.g.concat_rows(&parts);
        let idx: Vec<usize> = (0..n)
            .flat_map(|r| (0..k).map(move |j| j * n + r))
            .collect();
        let h = cx.g.gather_rows(table, &idx);
        let pidx: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
        let p = self.pos.forward(cx, &pidx);
        let h = cx.g.add(h, p);
        let o = self.depth.forward(cx, h, n, k);
        for (l, out) in self.outs.iter().enumerate() {
            let rows: Vec<usize> = (0..n).map(|r| r * k + l + 1).collect();
            let ol = cx.g.gather_rows(o, &rows);
            levels.push(out.forward(cx, ol));
        }
        Ok(RqLogits { levels })
    }

    /// Mean cross-entropy per token.
    pub fn loss<T: Scalar>(&self, cx: &mut Ctx<'_, T>, z: Var, codes: &[usize]) -> Result<Var> {
        let n = cx.g.shape(z).0;
        let k = self.config.levels();
        let logits = self.logits(cx, z, codes)?;
        let mut total: Option<Var> = None;
        for (l, &lg) in logits.levels.iter().enumerate() {
            let targets: Vec<usize> = (0..n).map(|r| codes[r * k + l]).collect();
            let ce = cx.g.cross_entropy(lg, &targets);
            let s = cx.g.sum(ce);
            total = Some(match total {
                None => s,
                Some(a) => cx.g.add(a, s),
            });
        }
        let total = total.expect("at least one level");
        Ok(cx.g.scale(total, lit(1.0 / (n * k) as f64)))
    }

    /// Sequential ancestral sampling of one frame's codes from `z: [1, d]`.
    pub fn sample<T: Scalar, R: rand::Rng + ?Sized>(
        &self,
        cx: &mut Ctx<'_, T>,
        z: Var,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let k = self.config.levels();
        let l0 = self.first.forward(cx, z);
        let mut codes = Vec::with_capacity(k);
        codes.push(sample_logits(cx.g.value(l0).data(), temperature, rng)?);
        if k == 1 {
            return Ok(codes);
        }
        let mut cache = self.depth.new_cache::<T>();
        let pz = self.z_proj.forward(cx, z);
        let p0 = self.pos.forward(cx, &[0]);
        let h0 = cx.g.add(pz, p0);
        for l in 1..k {
            let e = self.emb[l - 1].forward(cx, &[codes[l - 1]]);
            let p = self.pos.forward(cx, &[l]);
            let h = cx.g.add(e, p);
            let o = if l == 1 {
                let both = cx.g.concat_rows(&[h0, h]);
                let o = self.depth.forward_cached(cx, both, &mut cache)?;
                cx.g.gather_rows(o, &[1])
            } else {
                self.depth.forward_cached(cx, h, &mut cache)?
            };
            let lg = self.outs[l - 1].forward(cx, o);
            codes.push(sample_logits(cx.g.value(lg).data(), temperature, rng)?);
        }
        Ok(codes)
    }
}

/// Draw an index from `softmax(logits / temperature)`; non-positive or
/// vanishing temperatures decode greedily.
pub fn sample_logits<T: Scalar, R: rand::Rng + ?Sized>(
    logits: &[T],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::InvalidConfig("empty logits".into()));
    }
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    let (arg, mx) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    if !(temperature > 1e-6) {
        return Ok(arg);
    }
    let w: Vec<f64> = vals
        .iter()
        .map(|&v| libm::exp((v - mx) / temperature))
        .collect();
    let total: f64 = w.iter().sum();
    let u = rng::uniform(rng) * total;
    let mut acc = 0.0;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(w.len() - 1)
}

/// Probabilities `softmax(logits / temperature)`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|&v| libm::exp((v - mx) / temperature))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Row of a tensor as f64 logits.
pub fn row_logits<T: Scalar>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row(r).iter().map(|v| v.to_f64_lossy()).collect()
}
