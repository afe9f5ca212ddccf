//! Bayesian Bradley–Terry ratings with Gamma priors, reported on the Elo scale.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    AWins,
    BWins,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRecord {
    pub system_a: String,
    pub system_b: String,
    pub outcome: Outcome,
}

impl ComparisonRecord {
    pub fn new(a: &str, b: &str, outcome: Outcome) -> Self {
        ComparisonRecord {
            system_a: a.into(),
            system_b: b.into(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EloRating {
    pub system: String,
    pub strength: f64,
    pub elo: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EloConfig {
    pub alpha: f64,
    pub beta: f64,
    pub offset: f64,
    pub iters: usize,
}

impl Default for EloConfig {
    fn default() -> Self {
        EloConfig {
            alpha: 0.1,
            beta: 0.1,
            offset: 2000.0,
            iters: 30,
        }
    }
}

/// `P(A beats B) = 1 / (1 + 10^((E_B - E_A) / 400))`.
pub fn win_probability(ea: f64, eb: f64) -> f64 {
    1.0 / (1.0 + libm::pow(10.0, (eb - ea) / 400.0))
}

pub fn to_elo(strength: f64, offset: f64) -> f64 {
    400.0 * libm::log10(strength) + offset
}

/// Win tallies (ties split in half) and symmetric comparison counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Tallies {
    pub wins: Vec<f64>,
    /// Row-major `k x k`.
    pub counts: Vec<f64>,
}

impl Tallies {
    pub fn count(&self, a: usize, b: usize) -> f64 {
        self.counts[a * self.wins.len() + b]
    }
}

/// Each tie counts as half a win for both sides and one comparison.
pub fn ties_policy(systems: &[String], records: &[ComparisonRecord]) -> Result<Tallies> {
    let k = systems.len();
    let index = |id: &str| {
        systems
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSystem(id.into()))
    };
    let mut wins = vec![0.0; k];
    let mut counts = vec![0.0; k * k];
    for r in records {
        let a = index(&r.system_a)?;
        let b = index(&r.system_b)?;
        if a == b {
            return Err(Error::InvalidConfig(alloc::format!(
                "system {} compared with itself",
                r.system_a
            )));
        }
        match r.outcome {
            Outcome::AWins => wins[a] += 1.0,
            Outcome::BWins => wins[b] += 1.0,
            Outcome::Tie => {
                wins[a] += 0.5;
                wins[b] += 0.5;
            }
        }
        counts[a * k + b] += 1.0;
        counts[b * k + a] += 1.0;
    }
    Ok(Tallies { wins, counts })
}

/// Posterior shape and rate for every system given current strengths.
pub fn posterior(t: &Tallies, s: &[f64], cfg: &EloConfig) -> Vec<(f64, f64)> {
    let k = s.len();
    (0..k)
        .map(|a| {
            let rate = cfg.beta
                + (0..k)
                    .filter(|&b| b != a)
                    .map(|b| t.count(a, b) / (s[a] + s[b]))
                    .sum::<f64>();
            (cfg.alpha + t.wins[a], rate)
        })
        .collect()
}

/// One simultaneous update `S_A <- (alpha + w_A) / (beta + sum_B n_AB / (S_A + S_B))`.
pub fn sweep(t: &Tallies, s: &[f64], cfg: &EloConfig) -> Vec<f64> {
    posterior(t, s, cfg)
        .into_iter()
        .map(|(a, b)| a / b)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EloFit {
    pub ratings: Vec<EloRating>,
    /// Largest strength change in the final sweep.
    pub last_change: f64,
}

impl EloFit {
    pub fn get(&self, system: &str) -> Option<&EloRating> {
        self.ratings.iter().find(|r| r.system == system)
    }
}

pub fn fit(systems: &[String], records: &[ComparisonRecord], cfg: &EloConfig) -> Result<EloFit> {
    if !(cfg.alpha > 0.0 && cfg.beta > 0.0) {
        return Err(Error::InvalidConfig(
            "gamma prior parameters must be positive".into(),
        ));
    }
    let t = ties_policy(systems, records)?;
    let mut s = vec![1.0; systems.len()];
    let mut last_change = 0.0;
    for _ in 0..cfg.iters {
        let next = sweep(&t, &s, cfg);
        last_change = next
            .iter()
            .zip(&s)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        s = next;
    }
    let post = posterior(&t, &s, cfg);
    let ratings = systems
        .iter()
        .zip(&s)
        .zip(post)
        .map(|((id, &st), (shape, rate))| {
            let lo = gamma_quantile(shape, 0.025)? / rate;
            let hi = gamma_quantile(shape, 0.975)? / rate;
            Ok(EloRating {
                system: id.clone(),
                strength: st,
                elo: to_elo(st, cfg.offset),
                ci_low: to_elo(lo, cfg.offset),
                ci_high: to_elo(hi, cfg.offset),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EloFit {
        ratings,
        last_change,
    })
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_pre = a * libm::log(x) - x - libm::lgamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if libm::fabs(term) < libm::fabs(sum) * 1e-17 {
                break;
            }
        }
        (sum * libm::exp(ln_pre)).min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if libm::fabs(d) < tiny {
                d = tiny;
            }
            c = b + an / c;
            if libm::fabs(c) < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if libm::fabs(del - 1.0) < 1e-17 {
                break;
            }
        }
        (1.0 - libm::exp(ln_pre) * h).max(0.0)
    }
}

/// Quantile of `Gamma(shape, rate = 1)` by bisection on `log x`.
pub fn gamma_quantile(shape: f64, p: f64) -> Result<f64> {
    if !(shape > 0.0) || !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfRange(alloc::format!(
            "gamma quantile of shape {shape} at {p}"
        )));
    }
    let (mut lo, mut hi) = (-700.0f64, 7.0f64);
    while gamma_p(shape, libm::exp(hi)) < p {
        hi += 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = gamma_p(shape, libm::exp(mid));
        if libm::fabs(v - p) <= 1e-10 * p.min(1.0 - p) || hi - lo < 1e-13 {
            return Ok(libm::exp(mid));
        }
        if v < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(libm::exp(0.5 * (lo + hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn ids(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| ["a", "b", "c", "d"][i].to_string())
            .collect()
    }

    #[test]
    fn win_probability_values() {
        assert_eq!(win_probability(1500.0, 1500.0), 0.5);
        assert!((win_probability(1400.0, 1000.0) - 10.0 / 11.0).abs() < 1e-12);
        assert!((win_probability(1000.0, 1400.0) - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn no_data_gives_prior() {
        let f = fit(&ids(3), &[], &EloConfig::default()).unwrap();
        for r in &f.ratings {
            assert_eq!(r.strength, 1.0);
            assert_eq!(r.elo, 2000.0);
            assert!(r.ci_low < r.elo && r.elo < r.ci_high);
        }
    }

    #[test]
    fn tie_counts() {
        let s = ids(2);
        let ties = vec![ComparisonRecord::new("a", "b", Outcome::Tie); 10];
        let t = ties_policy(&s, &ties).unwrap();
        assert_eq!(t.wins, vec![5.0, 5.0]);
        assert_eq!(t.count(0, 1), 10.0);
        let mut mixed = vec![ComparisonRecord::new("a", "b", Outcome::AWins); 3];
        mixed.push(ComparisonRecord::new("b", "a", Outcome::Tie));
        assert_eq!(ties_policy(&s, &mixed).unwrap().wins[0], 3.5);
    }

    #[test]
    fn unknown_system_is_rejected() {
        let r = [ComparisonRecord::new("a", "z", Outcome::AWins)];
        assert!(matches!(
            fit(&ids(2), &r, &EloConfig::default()),
            Err(Error::UnknownSystem(_))
        ));
    }

    #[test]
    fn gamma_p_known_values() {
        // P(1, x) = 1 - exp(-x)
        for x in [0.1, 1.0, 3.0, 10.0] {
            assert!((gamma_p(1.0, x) - (1.0 - libm::exp(-x))).abs() < 1e-14);
        }
        let q = gamma_quantile(1.0, 0.5).unwrap();
        assert!((q - core::f64::consts::LN_2).abs() < 1e-9);
    }
}
