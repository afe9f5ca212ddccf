//! Finite-difference verification of the differentiation engine.
//!
//! The checks here only evaluate forward values, so they are independent of
//! the reverse and forward rules they validate.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::{
    randn, Ctx, Embedding, GatedMlp, LayerNorm, Linear, ParamStore, Positional, TimeEmbedding,
    Transformer,
};
use crate::tensor::Tensor;

type Build = Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Var>;

/// A differentiable function of some inputs and a parameter store.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    /// Normwise relative error of reverse-mode gradients vs central differences.
    pub grad_rel_err: f64,
    /// Normwise relative error of forward-mode tangents vs central differences.
    pub jvp_rel_err: f64,
    /// Relative gap between `u . (J v)` and `v . (J^T u)`.
    pub duality_rel_err: f64,
}

impl Case {
    pub fn new(
        name: &'static str,
        store: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Var + 'static,
    ) -> Self {
        Case {
            name,
            store,
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Tensor<f64> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.g.constant(t.clone())).collect();
        let out = (self.build)(&mut cx, &vars);
        g.value(out).clone()
    }

    /// Run gradient, tangent and duality checks with step `h`.
    pub fn check(&self, seed: u64, h: f64) -> CaseReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out0 = self.eval(&self.store, &self.inputs);
        let u: Tensor<f64> = randn(&mut rng, out0.rows(), out0.cols(), 1.0);
        let dir_params: Vec<Tensor<f64>> = self
            .store
            .tensors()
            .iter()
            .map(|t| randn::<f64, _>(&mut rng, t.rows(), t.cols(), 1.0).reshape(t.shape()))
            .collect();
        let dir_inputs: Vec<Tensor<f64>> = self
            .inputs
            .iter()
            .map(|t| randn::<f64, _>(&mut rng, t.rows(), t.cols(), 1.0).reshape(t.shape()))
            .collect();

        // Analytic: one recorded pass for both modes.
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, true);
        let in_vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| cx.g.leaf(t.clone(), true))
            .collect();
        let out = (self.build)(&mut cx, &in_vars);
        let bindings = cx.into_bindings();
        let uv = g.constant(u.clone());
        let weighted = g.mul(out, uv);
        let loss = g.sum(weighted);
        let grads = g.backward(loss).expect("backward");
        let param_grads = bindings.gradients(&grads, &self.store);
        let input_grads: Vec<Tensor<f64>> = in_vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();

        let mut seeds = Vec::new();
        for id in self.store.ids() {
            if let Some(v) = bindings.var(id) {
                seeds.push((v, dir_params[id.index()].clone()));
            }
        }
        for (&v, d) in in_vars.iter().zip(&dir_inputs) {
            seeds.push((v, d.clone()));
        }
        let tangents = g.tangents(&seeds).expect("tangents");
        let jv = tangents
            .get(out)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(out0.shape()));

        // Numerical gradient, coordinate by coordinate.
        let scalar =
            |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| self.eval(store, inputs).dot(&u);
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        let mut store = self.store.clone();
        for (pi, pg) in param_grads.iter().enumerate() {
            for j in 0..pg.len() {
                let orig = store.tensors()[pi].data()[j];
                store.tensors_mut()[pi].data_mut()[j] = orig + h;
                let fp = scalar(&store, &self.inputs);
                store.tensors_mut()[pi].data_mut()[j] = orig - h;
                let fm = scalar(&store, &self.inputs);
                store.tensors_mut()[pi].data_mut()[j] = orig;
                fd.push((fp - fm) / (2.0 * h));
                ad.push(pg.data()[j]);
            }
        }
        let mut inputs = self.inputs.clone();
        for (ii, ig) in input_grads.iter().enumerate() {
            for j in 0..ig.len() {
                let orig = inputs[ii].data()[j];
                inputs[ii].data_mut()[j] = orig + h;
                let fp = scalar(&self.store, &inputs);
                inputs[ii].data_mut()[j] = orig - h;
                let fm = scalar(&self.store, &inputs);
                inputs[ii].data_mut()[j] = orig;
                fd.push((fp - fm) / (2.0 * h));
                ad.push(ig.data()[j]);
            }
        }
        let grad_rel_err = rel_error(&ad, &fd);

        // Numerical directional derivative.
        let shifted = |sign: f64| {
            let mut s = self.store.clone();
            for (t, d) in s.tensors_mut().iter_mut().zip(&dir_params) {
                for (x, &dv) in t.data_mut().iter_mut().zip(d.data()) {
                    *x += sign * h * dv;
                }
            }
            let ins: Vec<Tensor<f64>> = self
                .inputs
                .iter()
                .zip(&dir_inputs)
                .map(|(t, d)| t.zip_map(d, |x, dv| x + sign * h * dv))
                .collect();
            self.eval(&s, &ins)
        };
        let (fp, fm) = (shifted(1.0), shifted(-1.0));
        let fd_jv: Vec<f64> = fp
            .data()
            .iter()
            .zip(fm.data())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let jvp_rel_err = rel_error(jv.data(), &fd_jv);

        let ujv = jv.dot(&u);
        let vjtu: f64 = param_grads
            .iter()
            .zip(&dir_params)
            .chain(input_grads.iter().zip(&dir_inputs))
            .map(|(g, d)| g.dot(d))
            .sum();
        let duality_rel_err =
            libm::fabs(ujv - vjtu) / libm::fabs(ujv).max(libm::fabs(vjtu)).max(1e-300);

        CaseReport {
            name: self.name,
            grad_rel_err,
            jvp_rel_err,
            duality_rel_err,
        }
    }
}

/// `max |a - b| / max(max |b|, tiny)`
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| libm::fabs(x - y))
        .fold(0.0, f64::max);
    let den = b
        .iter()
        .map(|y| libm::fabs(*y))
        .fold(0.0, f64::max)
        .max(1e-12);
    num / den
}

fn rand_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    randn(rng, rows, cols, 1.0)
}

/// One case per layer type and primitive used by the models.
pub fn standard_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 5, 3, true);
    cases.push(Case::new(
        "linear",
        s,
        alloc::vec![rand_input(&mut rng, 4, 5)],
        move |cx, x| lin.forward(cx, x[0]),
    ));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 6);
    // non-trivial affine parameters
    for t in s.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3;
        }
    }
    cases.push(Case::new(
        "layer_norm",
        s,
        alloc::vec![rand_input(&mut rng, 3, 6)],
        move |cx, x| ln.forward(cx, x[0]),
    ));

    let mut s = ParamStore::new();
    let mlp = GatedMlp::new(&mut s, &mut rng, "mlp", 4, 7);
    cases.push(Case::new(
        "gated_mlp",
        s,
        alloc::vec![rand_input(&mut rng, 3, 4)],
        move |cx, x| mlp.forward(cx, x[0]),
    ));

    let mut s = ParamStore::new();
    let l1 = Linear::new(&mut s, &mut rng, "l1", 4, 8, true);
    let l2 = Linear::new(&mut s, &mut rng, "l2", 8, 8, true);
    let l3 = Linear::new(&mut s, &mut rng, "l3", 8, 2, true);
    cases.push(Case::new(
        "mlp3",
        s,
        alloc::vec![rand_input(&mut rng, 5, 4)],
        move |cx, x| {
            let h = l1.forward(cx, x[0]);
            let h = cx.g.silu(h);
            let h = l2.forward(cx, h);
            let h = cx.g.tanh(h);
            l3.forward(cx, h)
        },
    ));

    cases.push(Case::new(
        "causal_attention",
        ParamStore::new(),
        alloc::vec![
            rand_input(&mut rng, 10, 4),
            rand_input(&mut rng, 10, 4),
            rand_input(&mut rng, 10, 4)
        ],
        |cx, x| {
            let spec = crate::autodiff::AttentionSpec {
                batch: 2,
                heads: 2,
                q_len: 5,
                k_len: 5,
                offset: 0,
            };
            cx.g.attention(x[0], x[1], x[2], spec)
        },
    ));

    cases.push(Case::new(
        "offset_attention",
        ParamStore::new(),
        alloc::vec![
            rand_input(&mut rng, 2, 4),
            rand_input(&mut rng, 5, 4),
            rand_input(&mut rng, 5, 4)
        ],
        |cx, x| {
            let spec = crate::autodiff::AttentionSpec {
                batch: 1,
                heads: 2,
                q_len: 2,
                k_len: 5,
                offset: 3,
            };
            cx.g.attention(x[0], x[1], x[2], spec)
        },
    ));

    cases.push(Case::new(
        "rope",
        ParamStore::new(),
        alloc::vec![rand_input(&mut rng, 3, 8)],
        |cx, x| cx.g.rope(x[0], 2, &[0, 3, 7], crate::nn::ROPE_BASE),
    ));

    let mut s = ParamStore::new();
    let tr = Transformer::new(&mut s, &mut rng, "tr", 2, 8, 12, 2, Positional::Rotary);
    cases.push(Case::new(
        "transformer_rotary",
        s,
        alloc::vec![rand_input(&mut rng, 8, 8)],
        move |cx, x| tr.forward(cx, x[0], 2, 4),
    ));

    let mut s = ParamStore::new();
    let tr = Transformer::new(&mut s, &mut rng, "tr", 1, 4, 6, 1, Positional::External);
    let pos = Embedding::new(&mut s, &mut rng, "pos", 3, 4, 0.5);
    cases.push(Case::new(
        "transformer_external",
        s,
        alloc::vec![rand_input(&mut rng, 6, 4)],
        move |cx, x| {
            let p = pos.forward(cx, &[0, 1, 2, 0, 1, 2]);
            let h = cx.g.add(x[0], p);
            tr.forward(cx, h, 2, 3)
        },
    ));

    let emb = TimeEmbedding::new(4, 1.0, 8.0);
    cases.push(Case::new(
        "time_embedding_elementwise",
        ParamStore::new(),
        alloc::vec![
            Tensor::from_f64(3, 1, &[0.1, 0.7, 1.4]),
            rand_input(&mut rng, 3, 8)
        ],
        move |cx, x| {
            let e = emb.forward(cx.g, x[0]);
            let p = cx.g.mul(e, x[1]);
            let sq = cx.g.square(p);
            let ex = cx.g.scale(sq, -0.5);
            let ex = cx.g.exp(ex);
            let c = cx.g.cos(x[1]);
            let s = cx.g.add(ex, c);
            let s = cx.g.add_scalar(s, 0.25);
            cx.g.clamp(s, -10.0, 10.0)
        },
    ));

    let mut s = ParamStore::new();
    let table = Embedding::new(&mut s, &mut rng, "tok", 5, 3, 1.0);
    cases.push(Case::new(
        "cross_entropy_gather",
        s,
        alloc::vec![rand_input(&mut rng, 4, 2)],
        move |cx, x| {
            let e = table.forward(cx, &[0, 3, 3, 1]);
            let joined = cx.g.concat_cols(&[e, x[0]]);
            let part = cx.g.slice_cols(joined, 1, 4);
            cx.g.cross_entropy(part, &[0, 3, 2, 1])
        },
    ));

    cases.push(Case::new(
        "broadcast_reductions",
        ParamStore::new(),
        alloc::vec![
            rand_input(&mut rng, 3, 4),
            rand_input(&mut rng, 1, 4),
            rand_input(&mut rng, 3, 1),
            rand_input(&mut rng, 1, 1)
        ],
        |cx, x| {
            let a = cx.g.mul(x[0], x[1]);
            let b = cx.g.sub(a, x[2]);
            let c = cx.g.mul(b, x[3]);
            let rs = cx.g.sum_cols(c);
            let m = cx.g.mean(c);
            let t = cx.g.add(rs, m);
            let stacked = cx.g.concat_rows(&[t, x[2]]);
            let sq = cx.g.square(stacked);
            cx.g.reshape(sq, 2, 3)
        },
    ));

    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_finite_difference_checks() {
        for case in standard_cases(7) {
            let r = case.check(11, 1e-5);
            assert!(r.grad_rel_err <= 1e-4, "{r:?}");
            assert!(r.jvp_rel_err <= 1e-4, "{r:?}");
            assert!(r.duality_rel_err <= 1e-6, "{r:?}");
        }
    }
}
