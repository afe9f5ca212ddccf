use calm_core::backbone::inject_noise;
use calm_core::rng;
use calm_core::source::{LatentSequence, MixtureComponent, NormStats, SyntheticSourceSpec};
use proptest::prelude::*;

fn channel_moments(corpus: &[LatentSequence], c: usize) -> (f64, f64) {
    let v: Vec<f64> = corpus
        .iter()
        .flat_map(|s| (0..s.len()).map(move |j| s.frame(j)[c]))
        .collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

#[test]
fn white_noise_source_has_unit_variance() {
    let corpus = SyntheticSourceSpec::gaussian_ar(2, 100, 0.0, 1.0)
        .sample_corpus(1000, 3)
        .unwrap();
    for c in 0..2 {
        let (_, v) = channel_moments(&corpus, c);
        assert!((v - 1.0).abs() < 0.02, "variance {v}");
    }
}

#[test]
fn ar_source_reaches_stationary_variance() {
    let a: f64 = 0.9;
    let corpus = SyntheticSourceSpec::gaussian_ar(2, 200, a, 1.0)
        .sample_corpus(500, 4)
        .unwrap();
    let want = 1.0 / (1.0 - a * a);
    for c in 0..2 {
        let (_, v) = channel_moments(&corpus, c);
        assert!((v / want - 1.0).abs() < 0.05, "variance {v} vs {want}");
    }
}

#[test]
fn ar_conditional_is_shifted_innovation() {
    let spec = SyntheticSourceSpec::gaussian_ar(3, 8, 0.7, 0.5);
    let hist = LatentSequence::new(vec![1.0, -2.0, 0.5, 0.2, 0.4, -1.0], 3, 25.0).unwrap();
    let m = spec.conditional(&hist).unwrap();
    assert_eq!(m.weights, vec![1.0]);
    for (got, x) in m.means[0].iter().zip([0.2, 0.4, -1.0]) {
        assert!((got - 0.7 * x).abs() < 1e-12);
    }
    assert!((m.std - 0.5).abs() < 1e-12);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(SyntheticSourceSpec::gaussian_ar(2, 8, 1.0, 1.0)
        .validate()
        .is_err());
    let bad = SyntheticSourceSpec::mixture_ar(
        2,
        8,
        0.5,
        1.0,
        vec![
            MixtureComponent {
                weight: 0.3,
                mean: 0.0,
            },
            MixtureComponent {
                weight: 0.3,
                mean: 1.0,
            },
        ],
    );
    assert!(bad.validate().is_err());
}

#[test]
fn noise_injection_endpoints_and_range() {
    let x = [0.3, -1.0];
    let e = [2.0, 0.5];
    assert_eq!(inject_noise(&x, 0.0, &e).unwrap(), x.to_vec());
    assert_eq!(inject_noise(&x, 1.0, &e).unwrap(), e.to_vec());
    assert!(inject_noise(&x, 1.5, &e).is_err());
    assert!(inject_noise(&x, -0.1, &e).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalized_corpus_is_standardized(seed in 0u64..1000, a in -0.8f64..0.8, scale in 0.2f64..3.0) {
        let raw = SyntheticSourceSpec::gaussian_ar(3, 16, a, scale).sample_corpus(40, seed).unwrap();
        let stats = NormStats::fit(&raw).unwrap();
        let norm: Vec<_> = raw.iter().map(|s| stats.normalize(s).unwrap()).collect();
        for c in 0..3 {
            let (m, v) = channel_moments(&norm, c);
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
        let back = stats.denormalize(&norm[0]).unwrap();
        for j in 0..back.len() {
            for (x, y) in back.frame(j).iter().zip(raw[0].frame(j)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixture_conditional_weights_sum_to_one(seed in 0u64..1000, w in 0.05f64..0.95) {
        let spec = SyntheticSourceSpec::mixture_ar(
            2,
            6,
            0.6,
            0.4,
            vec![
                MixtureComponent { weight: w, mean: -1.0 },
                MixtureComponent { weight: 1.0 - w, mean: 2.0 },
            ],
        );
        let s = spec.sample_sequence(seed).unwrap();
        let m = spec.conditional(&s.prefix(3)).unwrap();
        prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(m.std > 0.0);
    }

    #[test]
    fn noise_injection_is_exact(k in 0.0f64..=1.0, x in -5.0f64..5.0, e in -5.0f64..5.0) {
        let y = inject_noise(&[x], k, &[e]).unwrap()[0];
        prop_assert!((y - (k.sqrt() * e + (1.0 - k).sqrt() * x)).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in 0u64..u64::MAX) {
        let spec = SyntheticSourceSpec::gaussian_ar(2, 5, 0.5, 1.0);
        prop_assert_eq!(spec.sample_sequence(seed).unwrap(), spec.sample_sequence(seed).unwrap());
    }
}

#[test]
fn injected_noise_preserves_unit_variance() {
    let mut r = rng::stream(9, 0);
    let ys: Vec<f64> = (0..100_000)
        .map(|_| {
            let k = rng::uniform(&mut r);
            inject_noise(&[rng::normal(&mut r)], k, &[rng::normal(&mut r)]).unwrap()[0]
        })
        .collect();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
    assert!((v - 1.0).abs() < 0.02, "{v}");
}
