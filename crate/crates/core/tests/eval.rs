use calm_core::eval::{diversity, energy_distance, energy_test, frechet_distance};
use calm_core::rng;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn gaussian(n: usize, mean: f64, std: f64, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    (0..n)
        .map(|_| (0..d).map(|_| mean + std * rng::normal(&mut r)).collect())
        .collect()
}

#[test]
fn frechet_matches_closed_form_for_isotropic_gaussians() {
    let a = gaussian(20_000, 0.0, 1.0, 3, 1);
    let b = gaussian(20_000, 0.5, 2.0, 3, 2);
    let want = 3.0 * (0.5f64.powi(2) + (2.0 - 1.0f64).powi(2));
    let got = frechet_distance(&a, &b).unwrap().distance;
    assert!((got - want).abs() < 0.1 * want, "{got} vs {want}");
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let a = gaussian(500, 1.0, 1.0, 4, 3);
    assert!(frechet_distance(&a, &a).unwrap().distance.abs() < 1e-8);
}

#[test]
fn one_dimensional_energy_distance_matches_normal_oracle() {
    let delta = 1.0;
    let a = gaussian(3000, 0.0, 1.0, 1, 4);
    let b = gaussian(3000, delta, 1.0, 1, 5);
    // E|X-Y| for X-Y ~ N(m, 2) is sqrt(2) * (2 phi(z) + z (2 Phi(z) - 1)) with z = m / sqrt(2).
    let n = Normal::new(0.0, 1.0).unwrap();
    let folded = |m: f64| {
        let s = std::f64::consts::SQRT_2;
        let z = m / s;
        s * (2.0 * (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
            + z * (2.0 * n.cdf(z) - 1.0))
    };
    let want = 2.0 * folded(delta) - 2.0 * folded(0.0);
    let got = energy_distance(&a, &b).unwrap();
    assert!((got - want).abs() < 0.03, "{got} vs {want}");
}

#[test]
fn energy_test_separates_shifted_samples() {
    let a = gaussian(300, 0.0, 1.0, 2, 6);
    let b = gaussian(300, 0.5, 1.0, 2, 7);
    assert!(energy_test(&a, &b, 199, 0).unwrap().rejects(0.01));
    let c = gaussian(300, 0.0, 1.0, 2, 8);
    assert!(!energy_test(&a, &c, 199, 0).unwrap().rejects(0.01));
}

#[test]
fn diversity_needs_two_nonzero_embeddings() {
    assert!(diversity(&[vec![1.0, 0.0]]).is_err());
    assert!(diversity(&[vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
    assert!((diversity(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_distance_is_symmetric_and_near_zero_on_identical_sets(seed in 0u64..1000) {
        let a = gaussian(40, 0.0, 1.0, 2, seed);
        let b = gaussian(40, 0.3, 1.5, 2, seed + 1);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(energy_distance(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn frechet_is_nonnegative_and_symmetric(seed in 0u64..1000) {
        let a = gaussian(60, 0.0, 1.0, 3, seed);
        let b = gaussian(60, 0.2, 0.7, 3, seed + 7);
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn diversity_is_a_cosine(v in proptest::collection::vec(proptest::collection::vec(0.1f64..5.0, 3), 2..8)) {
        let d = diversity(&v).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&d));
    }
}
