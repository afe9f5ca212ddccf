use calm_core::autodiff::{grad, jvp};
use calm_core::{Graph, Tensor, Var};
use proptest::prelude::*;

fn mlp(g: &mut Graph<f64>, x: Var, w1: &Tensor<f64>, w2: &Tensor<f64>) -> Var {
    let a = g.constant(w1.clone());
    let b = g.constant(w2.clone());
    let h = g.matmul(x, a);
    let h = g.tanh(h);
    let h = g.matmul(h, b);
    let h = g.silu(h);
    let s = g.square(h);
    g.sum(s)
}

fn central_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-1.5f64..1.5, rows * cols)
        .prop_map(move |v| Tensor::from_vec(&[rows, cols], v))
}

#[test]
fn square_sum_gradient_is_twice_the_input() {
    let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
    let (v, dx) = grad(
        |g, w| {
            let s = g.mul(w, w);
            g.sum(s)
        },
        &x,
    )
    .unwrap();
    assert_eq!(v, 5.0);
    assert_eq!(dx.data(), &[2.0, 4.0]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
    let (_, dx) = grad(
        |g, _| {
            let c = g.constant(Tensor::scalar(4.0));
            g.sum(c)
        },
        &x,
    )
    .unwrap();
    assert!(dx.data().iter().all(|v| *v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]), true);
    assert!(g.backward(x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_gradient_matches_finite_differences(x in tensor(3, 4), w1 in tensor(4, 5), w2 in tensor(5, 2)) {
        let (_, dx) = grad(|g, v| mlp(g, v, &w1, &w2), &x).unwrap();
        let fd = central_difference(
            |p| {
                let mut g = Graph::new();
                let v = g.constant(p.clone());
                let y = mlp(&mut g, v, &w1, &w2);
                g.value(y).data()[0]
            },
            &x,
            1e-5,
        );
        for (a, b) in dx.data().iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn tangent_has_primal_shape_and_is_linear(x in tensor(2, 3), v in tensor(2, 3), s in -3.0f64..3.0) {
        let f = |g: &mut Graph<f64>, a: Var| {
            let b = g.sin(a);
            let c = g.mul(b, a);
            g.exp(c)
        };
        let (p, t) = jvp(f, &x, &v).unwrap();
        prop_assert_eq!(t.shape(), p.shape());
        let mut sv = v.clone();
        sv.data_mut().iter_mut().for_each(|e| *e *= s);
        let (_, ts) = jvp(f, &x, &sv).unwrap();
        for (a, b) in ts.data().iter().zip(t.data()) {
            prop_assert!((a - s * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn forward_and_reverse_modes_agree(x in tensor(3, 4), v in tensor(3, 4), w1 in tensor(4, 5), w2 in tensor(5, 2)) {
        let (_, dx) = grad(|g, a| mlp(g, a, &w1, &w2), &x).unwrap();
        let (_, jv) = jvp(|g, a| mlp(g, a, &w1, &w2), &x, &v).unwrap();
        let dot: f64 = dx.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        prop_assert!((dot - jv.data()[0]).abs() <= 1e-10 * (1.0 + dot.abs()));
    }
}
