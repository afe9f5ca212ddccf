//! Tape-based automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are appended). [`Graph::backward`] replays the tape in reverse to produce
//! gradients of a scalar; [`Graph::tangents`] replays it forward to propagate
//! directional derivatives from seeded nodes (JVP).
//!
//! All operations act on matrices `[rows, cols]`. Binary elementwise ops
//! broadcast their right operand when it is `[1, cols]`, `[rows, 1]` or
//! `[1, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: (usize, usize), b: (usize, usize)) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b == (1, 1) {
        Some(Bcast::Scalar)
    } else if b == (1, a.1) {
        Some(Bcast::Row)
    } else if b == (a.0, 1) {
        Some(Bcast::Col)
    } else {
        None
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Absolute position of the first query; query `i` sees keys `j <= offset + i`.
    pub offset: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    AddScalar(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Tanh(Var),
    Silu(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    StopGradient,
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Rope { .. } => "rope",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::StopGradient => "stop_gradient",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Grads<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf, `None` when the leaf is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Forward-mode tangents for every node downstream of the seeds.
pub struct Tangents<T> {
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tangents<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.values.get(v.0).and_then(|t| t.as_ref())
    }
}

/// The recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf. Gradients are reported for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.cols(), bv.rows(), "matmul: inner dimensions differ");
            av.matmul(bv)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> (Tensor<T>, Bcast) {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(dims(av), dims(bv)).unwrap_or_else(|| {
            panic!(
                "{name}: cannot broadcast {:?} onto {:?}",
                dims(bv),
                dims(av)
            )
        });
        let cols = av.cols();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bidx(kind, cols, i)]))
            .collect();
        (Tensor::from_vec(&[av.rows(), cols], data), kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, "add", |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b, kind), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, "sub", |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b, kind), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, "mul", |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b, kind), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), |x| x.cos())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.max(lo).min(hi))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / lit(v.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|r| v.row(r).iter().copied().sum())
            .collect();
        let out = Tensor::from_vec(&[v.rows(), 1], data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims(xv);
        assert_eq!(dims(gv), (1, n), "layer_norm: gamma shape");
        assert_eq!(dims(bv), (1, n), "layer_norm: beta shape");
        let eps: T = lit(eps);
        let inv_n: T = lit(1.0 / n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_vec(&[m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Masked multi-head scaled dot-product attention. `q` is
    /// `[batch * q_len, heads * head_dim]`, `k` and `v` are
    /// `[batch * k_len, heads * head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.rows(), spec.batch * spec.q_len, "attention: q rows");
        assert_eq!(kv.rows(), spec.batch * spec.k_len, "attention: k rows");
        assert_eq!(dims(kv), dims(vv), "attention: k/v shape");
        assert_eq!(kv.cols(), d, "attention: k width");
        assert_eq!(d % spec.heads, 0, "attention: width not divisible by heads");
        let dh = d / spec.heads;
        let scale: T = lit(1.0 / libm::sqrt(dh as f64));
        let (ql, kl) = (spec.q_len, spec.k_len);
        let mut probs = vec![T::zero(); spec.batch * spec.heads * ql * kl];
        let mut out = vec![T::zero(); qv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let qo = b * ql * d + h * dh;
                let ko = b * kl * d + h * dh;
                let po = (b * spec.heads + h) * ql * kl;
                let p = &mut probs[po..po + ql * kl];
                T::gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    &qd[qo..],
                    d as isize,
                    1,
                    &kd[ko..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    kl as isize,
                    1,
                );
                for i in 0..ql {
                    let limit = (spec.offset + i + 1).min(kl);
                    let row = &mut p[i * kl..(i + 1) * kl];
                    let mx = row[..limit].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for s in row[..limit].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in row[..limit].iter_mut() {
                        *s /= z;
                    }
                    for s in row[limit..].iter_mut() {
                        *s = T::zero();
                    }
                }
                T::gemm(
                    ql,
                    kl,
                    dh,
                    T::one(),
                    p,
                    kl as isize,
                    1,
                    &vd[ko..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[qo..],
                    d as isize,
                    1,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_vec(&[spec.batch * ql, d], out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        )
    }

    /// Rotary position encoding applied per head to consecutive pairs.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Var {
        let xv = self.value(x);
        let (m, d) = dims(xv);
        assert_eq!(positions.len(), m, "rope: one position per row");
        assert_eq!(d % heads, 0, "rope: width not divisible by heads");
        let dh = d / heads;
        assert_eq!(dh % 2, 0, "rope: head dim must be even");
        let half = dh / 2;
        let mut cos = Vec::with_capacity(m * half);
        let mut sin = Vec::with_capacity(m * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * libm::pow(base, -2.0 * i as f64 / dh as f64);
                cos.push(lit(libm::cos(theta)));
                sin.push(lit(libm::sin(theta)));
            }
        }
        let out = rotate(xv, heads, &cos, &sin, false);
        let rg = self.rg(x);
        self.push(out, Op::Rope { x, heads, cos, sin }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), n], data);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows: widths differ");
            data.extend_from_slice(v.data());
            m += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(&[m, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), m, "concat_cols: heights differ");
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(&[m, n], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols: out of range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(&[xv.rows(), len], data);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshape(&[rows, cols]);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Identity in value; blocks both gradients and tangents.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Per-row softmax cross-entropy `[m, n] -> [m, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (m, n) = dims(lv);
        assert_eq!(targets.len(), m, "cross_entropy: one target per row");
        let mut probs = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < n, "cross_entropy: target {t} out of range {n}");
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            out.push(lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::from_vec(&[m, 1], out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode gradients of a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite {
                op: self.nodes[loss.0].op.name(),
                node: loss.0,
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            self.vjp(i, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
            }
        }
        Ok(Grads { leaves: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = matmul_nt(g, bv);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(av, g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let mut gb = reduce_bcast(g, *kind, self.value(*b).shape());
                    if neg {
                        gb.scale_assign(-T::one());
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                if self.rg(*a) {
                    let bd = bv.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bd[bidx(*kind, cols, j)])
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_vec(av.shape(), data));
                }
                if self.rg(*b) {
                    let prod = g.zip_map(av, |x, y| x * y);
                    let gb = reduce_bcast(&prod, *kind, bv.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Sin(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * x.cos());
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| -gv * x.sin());
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(out, |gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * silu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let two: T = lit(2.0);
                let d = g.zip_map(self.value(*a), |gv, x| two * gv * x);
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > lo && x < hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / lit(av.len() as f64);
                self.accumulate(grads, *a, Tensor::full(av.shape(), v));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let n = av.cols();
                let data = (0..av.len()).map(|j| g.data()[j / n]).collect();
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = dims(out);
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let inv_n: T = lit(1.0 / n as f64);
                    let mut dx = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            mean_d += dh;
                            mean_dx += dh * xh[j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx.push(rstd[r] * (dh - mean_d - xh[j] * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[m, n], dx));
                }
                if self.rg(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (j, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[j % n] += gv * h;
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[1, n], dg));
                }
                if self.rg(*beta) {
                    let db = reduce_bcast(g, Bcast::Row, &[1, n]);
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (dq, dk, dv) = attention_vjp(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    probs,
                    spec,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Rope { x, heads, cos, sin } => {
                let d = rotate(g, *heads, cos, sin, true);
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[src * n..(src + 1) * n];
                    for (o, &gv) in dst.iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    if self.rg(p) {
                        let d =
                            Tensor::from_vec(pv.shape(), g.data()[offset..offset + len].to_vec());
                        self.accumulate(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[m, w], data));
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (m, n) = dims(xv);
                let w = out.cols();
                let mut d = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::StopGradient => {}
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = dims(self.value(*logits));
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    let gr = g.data()[r];
                    for j in 0..n {
                        let ind = if j == targets[r] { T::one() } else { T::zero() };
                        d.push(gr * (probs[r * n + j] - ind));
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[m, n], d));
            }
        }
    }

    /// Forward-mode propagation. Each seed assigns a tangent to a node; the
    /// returned map holds the directional derivative of every node reachable
    /// from a seed. Nodes between seeds and their consumers that are not
    /// downstream of any seed have a zero (absent) tangent.
    pub fn tangents(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Tangents<T>> {
        let mut tan: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = self.nodes.len();
        for (v, t) in seeds {
            let val = self.value(*v);
            if val.shape() != t.shape() {
                return Err(shape_err("tangent seed", val.shape(), t.shape()));
            }
            tan[v.0] = Some(t.clone());
            start = start.min(v.0);
        }
        for i in start..self.nodes.len() {
            if tan[i].is_some() {
                continue;
            }
            let t = self.jvp_node(i, &tan);
            if let Some(t) = &t {
                if !t.all_finite() {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
            }
            tan[i] = t;
        }
        Ok(Tangents { values: tan })
    }

    fn jvp_node(&self, i: usize, tan: &[Option<Tensor<T>>]) -> Option<Tensor<T>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let t = |v: &Var| tan[v.0].as_ref();
        match &node.op {
            Op::Leaf | Op::StopGradient => None,
            Op::MatMul(a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let mut acc = Tensor::zeros(out.shape());
                if let Some(ta) = ta {
                    acc.add_assign(&ta.matmul(self.value(*b)));
                }
                if let Some(tb) = tb {
                    acc.add_assign(&self.value(*a).matmul(tb));
                }
                Some(acc)
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let cols = out.cols();
                let mut acc = ta.cloned().unwrap_or_else(|| Tensor::zeros(out.shape()));
                if let Some(tb) = tb {
                    let bd = tb.data();
                    for (j, o) in acc.data_mut().iter_mut().enumerate() {
                        *o += sign * bd[bidx(*kind, cols, j)];
                    }
                }
                Some(acc)
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = out.cols();
                let mut acc = Tensor::zeros(out.shape());
                let ad = av.data();
                let bd = bv.data();
                let o = acc.data_mut();
                if let Some(ta) = ta {
                    for (j, (o, &tv)) in o.iter_mut().zip(ta.data()).enumerate() {
                        *o += tv * bd[bidx(*kind, cols, j)];
                    }
                }
                if let Some(tb) = tb {
                    let tbd = tb.data();
                    for (j, o) in o.iter_mut().enumerate() {
                        *o += ad[j] * tbd[bidx(*kind, cols, j)];
                    }
                }
                Some(acc)
            }
            Op::Scale(a, s) => t(a).map(|ta| ta.map(|v| v * *s)),
            Op::AddScalar(a) => t(a).cloned(),
            Op::Reshape(a) => t(a).map(|ta| ta.clone().reshape(out.shape())),
            Op::Sin(a) => t(a).map(|ta| ta.zip_map(self.value(*a), |d, x| d * x.cos())),
            Op::Cos(a) => t(a).map(|ta| ta.zip_map(self.value(*a), |d, x| -d * x.sin())),
            Op::Exp(a) => t(a).map(|ta| ta.zip_map(out, |d, y| d * y)),
            Op::Tanh(a) => t(a).map(|ta| ta.zip_map(out, |d, y| d * (T::one() - y * y))),
            Op::Silu(a) => t(a).map(|ta| ta.zip_map(self.value(*a), |d, x| d * silu_grad(x))),
            Op::Square(a) => {
                let two: T = lit(2.0);
                t(a).map(|ta| ta.zip_map(self.value(*a), |d, x| two * d * x))
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                t(a).map(|ta| {
                    ta.zip_map(
                        self.value(*a),
                        |d, x| if x > lo && x < hi { d } else { T::zero() },
                    )
                })
            }
            Op::Sum(a) => t(a).map(|ta| Tensor::scalar(ta.sum())),
            Op::Mean(a) => t(a).map(|ta| Tensor::scalar(ta.sum() / lit(ta.len() as f64))),
            Op::SumCols(a) => t(a).map(|ta| {
                let data = (0..ta.rows())
                    .map(|r| ta.row(r).iter().copied().sum())
                    .collect();
                Tensor::from_vec(&[ta.rows(), 1], data)
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (tx, tg, tb) = (t(x), t(gamma), t(beta));
                if tx.is_none() && tg.is_none() && tb.is_none() {
                    return None;
                }
                let (m, n) = dims(out);
                let gam = self.value(*gamma).data();
                let inv_n: T = lit(1.0 / n as f64);
                let mut acc = vec![T::zero(); m * n];
                for r in 0..m {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let o = &mut acc[r * n..(r + 1) * n];
                    if let Some(tx) = tx {
                        let dxr = tx.row(r);
                        let mean_dx = dxr.iter().copied().sum::<T>() * inv_n;
                        let proj = xh
                            .iter()
                            .zip(dxr)
                            .map(|(&h, &d)| h * (d - mean_dx))
                            .sum::<T>()
                            * inv_n;
                        for j in 0..n {
                            let dxh = rstd[r] * (dxr[j] - mean_dx - xh[j] * proj);
                            o[j] += dxh * gam[j];
                        }
                    }
                    if let Some(tg) = tg {
                        for j in 0..n {
                            o[j] += xh[j] * tg.data()[j];
                        }
                    }
                    if let Some(tb) = tb {
                        for j in 0..n {
                            o[j] += tb.data()[j];
                        }
                    }
                }
                Some(Tensor::from_vec(&[m, n], acc))
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (tq, tk, tv) = (t(q), t(k), t(v));
                if tq.is_none() && tk.is_none() && tv.is_none() {
                    return None;
                }
                Some(attention_jvp(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    tq,
                    tk,
                    tv,
                    probs,
                    spec,
                ))
            }
            Op::Rope { x, heads, cos, sin } => t(x).map(|tx| rotate(tx, *heads, cos, sin, false)),
            Op::GatherRows(x, idx) => t(x).map(|tx| {
                let n = tx.cols();
                let mut data = Vec::with_capacity(idx.len() * n);
                for &r in idx {
                    data.extend_from_slice(tx.row(r));
                }
                Tensor::from_vec(&[idx.len(), n], data)
            }),
            Op::ConcatRows(parts) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    return None;
                }
                let mut data = Vec::with_capacity(out.len());
                for p in parts {
                    match t(p) {
                        Some(tp) => data.extend_from_slice(tp.data()),
                        None => data.extend(core::iter::repeat_n(T::zero(), self.value(*p).len())),
                    }
                }
                Some(Tensor::from_vec(out.shape(), data))
            }
            Op::ConcatCols(parts) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    return None;
                }
                let m = out.rows();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..m {
                    for p in parts {
                        match t(p) {
                            Some(tp) => data.extend_from_slice(tp.row(r)),
                            None => {
                                data.extend(core::iter::repeat_n(T::zero(), self.value(*p).cols()))
                            }
                        }
                    }
                }
                Some(Tensor::from_vec(out.shape(), data))
            }
            Op::SliceCols(x, start) => t(x).map(|tx| {
                let w = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..tx.rows() {
                    data.extend_from_slice(&tx.row(r)[*start..*start + w]);
                }
                Tensor::from_vec(out.shape(), data)
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => t(logits).map(|tl| {
                let n = tl.cols();
                let data = (0..tl.rows())
                    .map(|r| {
                        let row = tl.row(r);
                        let e: T = row
                            .iter()
                            .zip(&probs[r * n..(r + 1) * n])
                            .map(|(&d, &p)| d * p)
                            .sum();
                        e - row[targets[r]]
                    })
                    .collect();
                Tensor::from_vec(&[tl.rows(), 1], data)
            }),
        }
    }
}

/// Reverse-mode gradient of `f` at `x` for a scalar-valued recorded function.
pub fn grad<T: Scalar>(
    f: impl FnOnce(&mut Graph<T>, Var) -> Var,
    x: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv);
    let value = g.value(y).clone();
    let mut grads = g.backward(y)?;
    let dx = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value.data()[0], dx))
}

/// Forward-mode directional derivative: returns `(f(x), J_f(x) v)`.
pub fn jvp<T: Scalar>(
    f: impl FnOnce(&mut Graph<T>, Var) -> Var,
    x: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != v.shape() {
        return Err(shape_err("jvp direction", x.shape(), v.shape()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let y = f(&mut g, xv);
    let tangents = g.tangents(&[(xv, v.clone())])?;
    let primal = g.value(y).clone();
    let tangent = tangents
        .get(y)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(primal.shape()));
    Ok((primal, tangent))
}

/// `a @ b^T`
fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = dims(a);
    let (n, k2) = dims(b);
    assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        1,
        k as isize,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

/// `a^T @ b`
fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = dims(a);
    let (k2, n) = dims(b);
    assert_eq!(k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        1,
        m as isize,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

fn reduce_bcast<T: Scalar>(g: &Tensor<T>, kind: Bcast, shape: &[usize]) -> Tensor<T> {
    match kind {
        Bcast::Same => g.clone().reshape(shape),
        Bcast::Scalar => Tensor::from_vec(shape, vec![g.sum()]),
        Bcast::Row => {
            let n = g.cols();
            let mut acc = vec![T::zero(); n];
            for (j, &v) in g.data().iter().enumerate() {
                acc[j % n] += v;
            }
            Tensor::from_vec(shape, acc)
        }
        Bcast::Col => {
            let data = (0..g.rows())
                .map(|r| g.row(r).iter().copied().sum())
                .collect();
            Tensor::from_vec(shape, data)
        }
    }
}

fn rotate<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) -> Tensor<T> {
    let (m, d) = dims(x);
    let dh = d / heads;
    let half = dh / 2;
    let mut out = x.clone();
    let od = out.data_mut();
    let xd = x.data();
    for r in 0..m {
        for h in 0..heads {
            for i in 0..half {
                let c = cos[r * half + i];
                let s = if inverse {
                    -sin[r * half + i]
                } else {
                    sin[r * half + i]
                };
                let base = r * d + h * dh + 2 * i;
                let (a, b) = (xd[base], xd[base + 1]);
                od[base] = a * c - b * s;
                od[base + 1] = a * s + b * c;
            }
        }
    }
    out
}

fn attention_vjp<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
    probs: &[T],
    spec: &AttentionSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / spec.heads;
    let scale: T = lit(1.0 / libm::sqrt(dh as f64));
    let (ql, kl) = (spec.q_len, spec.k_len);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); ql * kl];
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let qo = b * ql * d + h * dh;
            let ko = b * kl * d + h * dh;
            let po = (b * spec.heads + h) * ql * kl;
            let p = &probs[po..po + ql * kl];
            // dV = P^T dO
            T::gemm(
                kl,
                ql,
                dh,
                T::one(),
                p,
                1,
                kl as isize,
                &gd[qo..],
                d as isize,
                1,
                T::zero(),
                &mut dv.data_mut()[ko..],
                d as isize,
                1,
            );
            // dP = dO V^T
            T::gemm(
                ql,
                dh,
                kl,
                T::one(),
                &gd[qo..],
                d as isize,
                1,
                &vd[ko..],
                1,
                d as isize,
                T::zero(),
                &mut dp,
                kl as isize,
                1,
            );
            for i in 0..ql {
                let pr = &p[i * kl..(i + 1) * kl];
                let dr = &mut dp[i * kl..(i + 1) * kl];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            // dQ = scale dS K
            T::gemm(
                ql,
                kl,
                dh,
                scale,
                &dp,
                kl as isize,
                1,
                &kd[ko..],
                d as isize,
                1,
                T::zero(),
                &mut dq.data_mut()[qo..],
                d as isize,
                1,
            );
            // dK = scale dS^T Q
            T::gemm(
                kl,
                ql,
                dh,
                scale,
                &dp,
                1,
                kl as isize,
                &qd[qo..],
                d as isize,
                1,
                T::zero(),
                &mut dk.data_mut()[ko..],
                d as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}

#[allow(clippy::too_many_arguments)]
fn attention_jvp<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tq: Option<&Tensor<T>>,
    tk: Option<&Tensor<T>>,
    tv: Option<&Tensor<T>>,
    probs: &[T],
    spec: &AttentionSpec,
) -> Tensor<T> {
    let d = q.cols();
    let dh = d / spec.heads;
    let scale: T = lit(1.0 / libm::sqrt(dh as f64));
    let (ql, kl) = (spec.q_len, spec.k_len);
    let mut out = Tensor::zeros(q.shape());
    let mut ds = vec![T::zero(); ql * kl];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let qo = b * ql * d + h * dh;
            let ko = b * kl * d + h * dh;
            let po = (b * spec.heads + h) * ql * kl;
            let p = &probs[po..po + ql * kl];
            ds.iter_mut().for_each(|x| *x = T::zero());
            if let Some(tq) = tq {
                T::gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    &tq.data()[qo..],
                    d as isize,
                    1,
                    &kd[ko..],
                    1,
                    d as isize,
                    T::one(),
                    &mut ds,
                    kl as isize,
                    1,
                );
            }
            if let Some(tk) = tk {
                T::gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    &qd[qo..],
                    d as isize,
                    1,
                    &tk.data()[ko..],
                    1,
                    d as isize,
                    T::one(),
                    &mut ds,
                    kl as isize,
                    1,
                );
            }
            for i in 0..ql {
                let pr = &p[i * kl..(i + 1) * kl];
                let dr = &mut ds[i * kl..(i + 1) * kl];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            let od = &mut out.data_mut()[qo..];
            T::gemm(
                ql,
                kl,
                dh,
                T::one(),
                &ds,
                kl as isize,
                1,
                &vd[ko..],
                d as isize,
                1,
                T::zero(),
                od,
                d as isize,
                1,
            );
            if let Some(tv) = tv {
                T::gemm(
                    ql,
                    kl,
                    dh,
                    T::one(),
                    p,
                    kl as isize,
                    1,
                    &tv.data()[ko..],
                    d as isize,
                    1,
                    T::one(),
                    od,
                    d as isize,
                    1,
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::<f64>::from_f64(1, 2, &[1.0, 2.0]);
        let (v, g) = grad(
            |g, x| {
                let sq = g.mul(x, x);
                g.sum(sq)
            },
            &w,
        )
        .unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let w = Tensor::<f64>::from_f64(1, 3, &[1.0, -2.0, 0.5]);
        let (_, g) = grad(
            |g, x| {
                let c = g.constant(Tensor::scalar(3.0));
                let z = g.scale(x, 0.0);
                let s = g.sum(z);
                g.add(c, s)
            },
            &w,
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn non_finite_gradient_reports_op() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1000.0), true);
        let e = g.exp(x);
        let e2 = g.exp(e);
        let z = g.scale(e2, 0.0);
        let err = g.backward(z);
        assert!(
            matches!(err, Err(Error::NonFinite { .. })),
            "{:?}",
            err.err()
        );
    }

    #[test]
    fn identity_jvp_returns_direction() {
        let x = Tensor::<f64>::from_f64(1, 3, &[0.3, -1.0, 2.0]);
        let v = Tensor::<f64>::from_f64(1, 3, &[1.0, 2.0, 3.0]);
        let (y, t) = jvp(|_, x| x, &x, &v).unwrap();
        assert_eq!(y, x);
        assert_eq!(t, v);
    }

    #[test]
    fn square_jvp_is_two_x() {
        let x = Tensor::<f64>::from_f64(1, 1, &[3.0]);
        let v = Tensor::<f64>::from_f64(1, 1, &[1.0]);
        let (_, t) = jvp(|g, x| g.mul(x, x), &x, &v).unwrap();
        assert_eq!(t.data(), &[6.0]);
    }

    #[test]
    fn jvp_rejects_mismatched_direction() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let v = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(
            jvp(|_, x| x, &x, &v),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stop_gradient_blocks_both_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let s = g.stop_gradient(x);
        let y = g.mul(s, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        let tan = g.tangents(&[(x, Tensor::scalar(1.0))]).unwrap();
        assert!(tan.get(s).is_none());
        assert_eq!(tan.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn single_position_attention_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(1, 4, &[0.1, 0.2, 0.3, 0.4]));
        let k = g.constant(Tensor::from_f64(1, 4, &[1.0, -1.0, 0.5, 2.0]));
        let v = g.constant(Tensor::from_f64(1, 4, &[5.0, 6.0, 7.0, 8.0]));
        let spec = AttentionSpec {
            batch: 1,
            heads: 2,
            q_len: 1,
            k_len: 1,
            offset: 0,
        };
        let o = g.attention(q, k, v, spec);
        assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[3, 4]));
        let ce = g.cross_entropy(l, &[0, 1, 3]);
        for &v in g.value(ce).data() {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }
}
