//! Parameter storage and the neural layers shared by every model.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AttentionSpec, Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Every parameter occupies exactly one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Register a parameter. Panics on duplicate names, which is a model
    /// construction bug.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self.id(name).ok_or_else(|| {
                Error::InvalidConfig(alloc::format!("unexpected parameter `{name}`"))
            })?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(crate::error::shape_err(
                    "parameter load",
                    self.tensors[id.0].shape(),
                    t.shape(),
                ));
            }
            self.tensors[id.0] = t.clone();
        }
        if other.len() != self.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// FNV-1a over names and values widened to little-endian f64, so a
    /// lossless cast keeps the checksum.
    pub fn checksum(&self) -> u64 {
        self.checksum_of(self.ids())
    }

    /// Checksum restricted to `ids`, in the order given.
    pub fn checksum_of(&self, ids: impl IntoIterator<Item = ParamId>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for id in ids {
            feed(self.names[id.0].as_bytes());
            buf.clear();
            for &v in self.tensors[id.0].data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
            feed(&buf);
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    }
}

/// Draws a `[rows, cols]` tensor of N(0, std^2) entries.
pub fn randn<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            lit(z * std)
        })
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Binds a parameter store into a graph for one forward pass.
///
/// Trainable bindings make each parameter a gradient-tracked leaf; frozen
/// bindings insert constants.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

/// Parameter-to-node mapping left behind by a [`Ctx`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            g,
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn into_bindings(self) -> Bindings {
        Bindings { vars: self.vars }
    }
}

impl Bindings {
    /// Gradient per parameter slot; unreachable parameters get zeros.
    pub fn gradients<T: Scalar>(&self, grads: &Grads<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_std(
            store,
            rng,
            name,
            in_dim,
            out_dim,
            bias,
            1.0 / libm::sqrt(in_dim as f64),
        )
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            randn(rng, in_dim, out_dim, std),
        );
        let b =
            bias.then(|| store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.param(self.w);
        let y = cx.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                cx.g.add(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(
                &alloc::format!("{name}.gamma"),
                Tensor::full(&[1, dim], T::one()),
            ),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.g.layer_norm(x, g, b, Self::EPS)
    }
}

/// SiLU-gated MLP: `down(silu(x W_gate) * (x W_up))`.
#[derive(Debug, Clone)]
pub struct GatedMlp {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl GatedMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        GatedMlp {
            gate: Linear::new(
                store,
                rng,
                &alloc::format!("{name}.gate"),
                dim,
                hidden,
                false,
            ),
            up: Linear::new(store, rng, &alloc::format!("{name}.up"), dim, hidden, false),
            down: Linear::new(
                store,
                rng,
                &alloc::format!("{name}.down"),
                hidden,
                dim,
                false,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = self.gate.forward(cx, x);
        let g = cx.g.silu(g);
        let u = self.up.forward(cx, x);
        let h = cx.g.mul(g, u);
        self.down.forward(cx, h)
    }
}

/// Per-layer key/value history for incremental decoding of one sequence.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    width: usize,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(layers: usize, width: usize) -> Self {
        KvCache {
            layers: vec![(Vec::new(), Vec::new()); layers],
            width,
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        for (k, v) in &mut self.layers {
            k.clear();
            v.clear();
        }
        self.len = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Rotary,
    /// Positions are supplied by the caller (e.g. learned absolute embeddings).
    External,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: GatedMlp,
}

/// Pre-norm causal transformer stack.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub dim: usize,
    pub heads: usize,
    pub positional: Positional,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        layers: usize,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        positional: Positional,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim must be divisible by heads"
        );
        let out_std = 1.0 / libm::sqrt(dim as f64 * 2.0 * layers.max(1) as f64);
        let blocks = (0..layers)
            .map(|i| {
                let p = alloc::format!("{name}.layers.{i}");
                Block {
                    ln1: LayerNorm::new(store, &alloc::format!("{p}.ln1"), dim),
                    qkv: Linear::new(
                        store,
                        rng,
                        &alloc::format!("{p}.attn.qkv"),
                        dim,
                        3 * dim,
                        false,
                    ),
                    proj: Linear::with_std(
                        store,
                        rng,
                        &alloc::format!("{p}.attn.out"),
                        dim,
                        dim,
                        false,
                        out_std,
                    ),
                    ln2: LayerNorm::new(store, &alloc::format!("{p}.ln2"), dim),
                    mlp: GatedMlp::new(store, rng, &alloc::format!("{p}.mlp"), dim, mlp_dim),
                }
            })
            .collect();
        Transformer {
            blocks,
            ln_f: LayerNorm::new(store, &alloc::format!("{name}.ln_f"), dim),
            dim,
            heads,
            positional,
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Full causal forward over `batch` sequences of `len` rows each.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, batch: usize, len: usize) -> Var {
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let spec = AttentionSpec {
            batch,
            heads: self.heads,
            q_len: len,
            k_len: len,
            offset: 0,
        };
        let mut h = x;
        for blk in &self.blocks {
            let a = blk.ln1.forward(cx, h);
            let qkv = blk.qkv.forward(cx, a);
            let d = self.dim;
            let mut q = cx.g.slice_cols(qkv, 0, d);
            let mut k = cx.g.slice_cols(qkv, d, d);
            let v = cx.g.slice_cols(qkv, 2 * d, d);
            if self.positional == Positional::Rotary {
                q = cx.g.rope(q, self.heads, &positions, ROPE_BASE);
                k = cx.g.rope(k, self.heads, &positions, ROPE_BASE);
            }
            let att = cx.g.attention(q, k, v, spec);
            let o = blk.proj.forward(cx, att);
            h = cx.g.add(h, o);
            let m = blk.ln2.forward(cx, h);
            let m = blk.mlp.forward(cx, m);
            h = cx.g.add(h, m);
        }
        self.ln_f.forward(cx, h)
    }

    /// Incremental forward for one sequence: `x` holds the next rows, which
    /// occupy positions `cache.len()..cache.len() + rows`.
    pub fn forward_cached<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        cache: &mut KvCache<T>,
    ) -> Result<Var> {
        if cache.layers.len() != self.blocks.len() || cache.width != self.dim {
            return Err(crate::error::shape_err(
                "kv cache",
                (self.blocks.len(), self.dim),
                (cache.layers.len(), cache.width),
            ));
        }
        let rows = cx.g.shape(x).0;
        let start = cache.len;
        let positions: Vec<usize> = (start..start + rows).collect();
        let d = self.dim;
        let mut h = x;
        for (blk, (kc, vc)) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            if kc.len() != start * d {
                return Err(Error::CacheMismatch {
                    cached: kc.len() / d,
                    expected: start,
                });
            }
            let a = blk.ln1.forward(cx, h);
            let qkv = blk.qkv.forward(cx, a);
            let mut q = cx.g.slice_cols(qkv, 0, d);
            let mut k = cx.g.slice_cols(qkv, d, d);
            let v = cx.g.slice_cols(qkv, 2 * d, d);
            if self.positional == Positional::Rotary {
                q = cx.g.rope(q, self.heads, &positions, ROPE_BASE);
                k = cx.g.rope(k, self.heads, &positions, ROPE_BASE);
            }
            kc.extend_from_slice(cx.g.value(k).data());
            vc.extend_from_slice(cx.g.value(v).data());
            let total = start + rows;
            let k_all = cx.g.constant(Tensor::from_vec(&[total, d], kc.clone()));
            let v_all = cx.g.constant(Tensor::from_vec(&[total, d], vc.clone()));
            let spec = AttentionSpec {
                batch: 1,
                heads: self.heads,
                q_len: rows,
                k_len: total,
                offset: start,
            };
            let att = cx.g.attention(q, k_all, v_all, spec);
            let o = blk.proj.forward(cx, att);
            h = cx.g.add(h, o);
            let m = blk.ln2.forward(cx, h);
            let m = blk.mlp.forward(cx, m);
            h = cx.g.add(h, m);
        }
        cache.len = start + rows;
        Ok(self.ln_f.forward(cx, h))
    }

    pub fn new_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache::new(self.blocks.len(), self.dim)
    }
}

/// Fourier features of a scalar time: `[sin(w_i t), cos(w_i t)]` with
/// geometrically spaced frequencies.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
}

impl TimeEmbedding {
    pub const DEFAULT_FREQUENCIES: usize = 16;

    pub fn new(count: usize, min_freq: f64, max_freq: f64) -> Self {
        let freqs = (0..count)
            .map(|i| {
                let frac = if count > 1 {
                    i as f64 / (count - 1) as f64
                } else {
                    0.0
                };
                min_freq * libm::pow(max_freq / min_freq, frac)
            })
            .collect();
        TimeEmbedding { freqs }
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// `t` is `[n, 1]`; output `[n, 2F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, t: Var) -> Var {
        let f = g.constant(Tensor::from_vec(
            &[1, self.freqs.len()],
            self.freqs.iter().map(|&v| lit(v)).collect(),
        ));
        let arg = g.matmul(t, f);
        let s = g.sin(arg);
        let c = g.cos(arg);
        g.concat_cols(&[s, c])
    }
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding::new(Self::DEFAULT_FREQUENCIES, 1.0, 100.0)
    }
}

/// Learned lookup table `[count, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        count: usize,
        dim: usize,
        std: f64,
    ) -> Self {
        Embedding {
            table: store.add(name, randn(rng, count, dim, std)),
            count,
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, idx: &[usize]) -> Var {
        let t = cx.param(self.table);
        cx.g.gather_rows(t, idx)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}
