//! Fréchet distance between Gaussians fitted to two embedding sets.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use super::moments;
use crate::error::{Error, Result};
use crate::rng;

/// Diagonal load added to a covariance whose smallest eigenvalue is not
/// positive.
pub const JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetReport {
    pub mean_a: Vec<f64>,
    pub cov_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub cov_b: Vec<f64>,
    /// Squared distance, clipped at zero.
    pub distance: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub jittered: bool,
    pub ci: Option<(f64, f64)>,
}

fn matrix(d: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, v)
}

fn load_if_singular(d: usize, cov: &mut [f64]) -> bool {
    let eig = SymmetricEigen::new(matrix(d, cov));
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    if eig.eigenvalues.iter().any(|&l| l <= 1e-12 * scale) {
        for i in 0..d {
            cov[i * d + i] += JITTER;
        }
        true
    } else {
        false
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `tr((A B)^{1/2})` through the symmetric form `A^{1/2} B A^{1/2}`, with
/// negative eigenvalues clipped to zero.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let m = &sa * b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|&l| libm::sqrt(l.max(0.0)))
        .sum()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})` on fitted moments.
pub fn frechet_from_moments(
    d: usize,
    mean_a: &[f64],
    cov_a: &[f64],
    mean_b: &[f64],
    cov_b: &[f64],
) -> f64 {
    if mean_a == mean_b && cov_a == cov_b {
        return 0.0;
    }
    let a = matrix(d, cov_a);
    let b = matrix(d, cov_b);
    let mu: f64 = mean_a
        .iter()
        .zip(mean_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let cross = 0.5 * (trace_sqrt_product(&a, &b) + trace_sqrt_product(&b, &a));
    (mu + a.trace() + b.trace() - 2.0 * cross).max(0.0)
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    for set in [a, b] {
        if set.len() < d + 1 {
            return Err(Error::NotEnoughSamples {
                needed: d + 1,
                got: set.len(),
            });
        }
        if let Some(bad) = set.iter().find(|s| s.len() != d) {
            return Err(crate::error::shape_err("embedding width", d, bad.len()));
        }
    }
    Ok(d)
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetReport> {
    let d = check_sets(a, b)?;
    let (mean_a, mut cov_a) = moments(a);
    let (mean_b, mut cov_b) = moments(b);
    let ja = load_if_singular(d, &mut cov_a);
    let jb = load_if_singular(d, &mut cov_b);
    let distance = frechet_from_moments(d, &mean_a, &cov_a, &mean_b, &cov_b);
    Ok(FrechetReport {
        mean_a,
        cov_a,
        mean_b,
        cov_b,
        distance,
        count_a: a.len(),
        count_b: b.len(),
        jittered: ja || jb,
        ci: None,
    })
}

/// Distance plus a percentile bootstrap 95% interval from `resamples`
/// with-replacement redraws of both sets.
pub fn frechet_with_ci(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    resamples: usize,
    seed: u64,
) -> Result<FrechetReport> {
    let mut report = frechet_distance(a, b)?;
    if resamples == 0 {
        return Ok(report);
    }
    let mut r = rng::stream(seed, 32);
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let ra: Vec<Vec<f64>> = (0..a.len())
            .map(|_| a[r.random_range(0..a.len())].clone())
            .collect();
        let rb: Vec<Vec<f64>> = (0..b.len())
            .map(|_| b[r.random_range(0..b.len())].clone())
            .collect();
        draws.push(frechet_distance(&ra, &rb)?.distance);
    }
    draws.sort_by(f64::total_cmp);
    report.ci = Some((percentile(&draws, 0.025), percentile(&draws, 0.975)));
    Ok(report)
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_closed_form() {
        let d = frechet_from_moments(1, &[0.0], &[1.0], &[1.0], &[4.0]);
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn same_samples_give_zero() {
        let mut r = rng::stream(1, 0);
        let a: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng::normal(&mut r)).collect())
            .collect();
        assert_eq!(frechet_distance(&a, &a).unwrap().distance, 0.0);
    }

    #[test]
    fn too_few_samples() {
        let a = vec![vec![0.0, 1.0]; 2];
        assert!(matches!(
            frechet_distance(&a, &a),
            Err(Error::NotEnoughSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn singular_covariance_is_jittered() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let b: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
        let r = frechet_distance(&a, &b).unwrap();
        assert!(r.jittered);
        assert!(r.distance.is_finite());
    }
}
