use std::f64::consts::FRAC_PI_2;

use calm_core::heads::consistency::ConsistencyHead;
use calm_core::heads::rq::{softmax, RqConfig, RqHead};
use calm_core::heads::{HeadConfig, TrigBatch};
use calm_core::nn::{randn, Ctx, ParamStore};
use calm_core::{rng, Graph, Tensor};
use proptest::prelude::*;

fn head(seed: u64) -> (ParamStore<f64>, ConsistencyHead) {
    let mut store = ParamStore::new();
    let h = ConsistencyHead::new(
        &mut store,
        &mut rng::stream(seed, 0),
        HeadConfig::new(3, 8, 16, 2),
    )
    .unwrap();
    (store, h)
}

fn apply(
    store: &ParamStore<f64>,
    h: &ConsistencyHead,
    x: &Tensor<f64>,
    z: &Tensor<f64>,
    t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, false);
    let xv = cx.constant(x.clone());
    let zv = cx.constant(z.clone());
    let tv = cx.constant(Tensor::full(&[x.rows(), 1], t));
    let zc = h.net.project_cond(&mut cx, zv);
    let f = h.apply(&mut cx, xv, tv, zc);
    let big = h.net.forward(&mut cx, xv, tv, zc);
    (g.value(f).data().to_vec(), g.value(big).data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn boundary_returns_input(seed in 0u64..500, scale in 0.1f64..10.0) {
        let (store, h) = head(seed);
        let mut r = rng::stream(seed, 1);
        let x = randn(&mut r, 5, 3, scale);
        let z = randn(&mut r, 5, 8, 1.0);
        let (f, _) = apply(&store, &h, &x, &z, 0.0);
        prop_assert_eq!(f.as_slice(), x.data());
    }

    #[test]
    fn output_uses_trig_skip_connection(seed in 0u64..500, t in 0.0f64..=FRAC_PI_2) {
        let (store, h) = head(seed);
        let mut r = rng::stream(seed, 2);
        let x = randn(&mut r, 4, 3, 1.0);
        let z = randn(&mut r, 4, 8, 1.0);
        let (f, big) = apply(&store, &h, &x, &z, t);
        for ((fv, xv), bv) in f.iter().zip(x.data()).zip(&big) {
            prop_assert!((fv - (t.cos() * xv - t.sin() * bv)).abs() < 1e-12);
        }
    }

    #[test]
    fn trig_batch_interpolates(seed in 0u64..500) {
        let mut r = rng::stream(seed, 3);
        let x0 = randn::<f64, _>(&mut r, 6, 2, 1.0);
        let b = TrigBatch::sample(x0.clone(), &mut r);
        let xt = b.x_t();
        for i in 0..6 {
            let t = b.t[i];
            prop_assert!((0.0..=FRAC_PI_2).contains(&t));
            for j in 0..2 {
                let want = t.cos() * x0.get(i, j) + t.sin() * b.eps.get(i, j);
                prop_assert!((xt.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-20.0f64..20.0, 1..12), tau in 0.1f64..5.0) {
        let p = softmax(&v, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }
}

#[test]
fn times_outside_the_interval_are_rejected() {
    let x = Tensor::<f64>::zeros(&[2, 1]);
    assert!(TrigBatch::new(x.clone(), x.clone(), vec![0.1, 1.7]).is_err());
    assert!(TrigBatch::new(x.clone(), x, vec![-0.1, 0.3]).is_err());
}

#[test]
fn rq_logits_are_depth_causal() {
    let cfg = RqConfig {
        cond_dim: 8,
        sizes: vec![5, 6, 7],
        width: 16,
        mlp_dim: 32,
        heads: 2,
        layers: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(5, 0);
    let h = RqHead::new(&mut store, &mut r, cfg).unwrap();
    let z = randn::<f64, _>(&mut r, 2, 8, 1.0);
    let run = |codes: &[usize]| {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let zv = cx.constant(z.clone());
        let l = h.logits(&mut cx, zv, codes).unwrap();
        l.levels
            .iter()
            .map(|v| g.value(*v).data().to_vec())
            .collect::<Vec<_>>()
    };
    let base = run(&[1, 2, 3, 4, 5, 6]);
    assert_eq!(
        base.iter().map(|l| l.len() / 2).collect::<Vec<_>>(),
        vec![5, 6, 7]
    );
    let changed = run(&[1, 2, 0, 4, 5, 1]);
    assert_eq!(base[0], changed[0]);
    assert_eq!(base[1], changed[1]);
    assert_eq!(base[2], changed[2]);
    let changed = run(&[0, 2, 3, 4, 5, 6]);
    assert_eq!(base[0], changed[0]);
    assert_ne!(base[1], changed[1]);
}

#[test]
fn rq_rejects_out_of_range_codes() {
    let cfg = RqConfig {
        cond_dim: 8,
        sizes: vec![4, 4],
        width: 8,
        mlp_dim: 16,
        heads: 2,
        layers: 1,
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(6, 0);
    let h = RqHead::new(&mut store, &mut r, cfg).unwrap();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, false);
    let z = cx.constant(randn(&mut r, 1, 8, 1.0));
    assert!(h.logits(&mut cx, z, &[0, 4]).is_err());
}

#[test]
fn fixed_weight_ignores_the_weight_net() {
    use calm_core::heads::consistency::{consistency_loss, ConsistencyOptions};
    let mut r = rng::stream(5, 0);
    let x0 = randn::<f64, _>(&mut r, 6, 3, 1.0);
    let b = TrigBatch::sample(x0, &mut r);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let w = g.leaf(Tensor::full(&[6, 1], 0.7), true);
    let mut cx = Ctx::new(&mut g, &store, false);
    let mut student = |_: &mut Ctx<'_, f64>, x, _| x;
    let opts = ConsistencyOptions {
        adaptive_weight: false,
        ..ConsistencyOptions::default()
    };
    let terms = consistency_loss(&mut cx, &b, &mut student, None, w, opts).unwrap();
    let loss = g.value(terms.loss).data()[0];
    assert!((loss - terms.residual).abs() < 1e-12);
    let grads = g.backward(terms.loss).unwrap();
    assert!(grads
        .get(w)
        .map_or(true, |t| t.data().iter().all(|v| *v == 0.0)));
}
