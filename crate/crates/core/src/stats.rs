//! Small statistical toolkit for the sampler tests and the audits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation (0 for fewer than two values).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn std_error(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// `sqrt((s_a² + s_b²)/2)`
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    ((std_dev(a).powi(2) + std_dev(b).powi(2)) / 2.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson goodness-of-fit. `fitted` parameters are subtracted from the
/// degrees of freedom.
pub fn chi_square_gof(observed: &[u64], expected: &[f64], fitted: usize) -> Result<TestResult> {
    if observed.len() != expected.len() || observed.len() < 2 + fitted {
        return Err(Error::InsufficientSamples("need matching bins and positive dof".into()));
    }
    let statistic = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let dof = (observed.len() - 1 - fitted) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| Error::InvalidInputs(e.to_string()))?;
    Ok(TestResult {
        statistic,
        p_value: chi.sf(statistic),
    })
}

/// Asymptotic Kolmogorov survival function with Stephens' small-sample
/// correction applied to `sqrt(n_eff)·D`.
fn kolmogorov_sf(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<TestResult> {
    if xs.is_empty() {
        return Err(Error::InsufficientSamples("empty sample".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(d, n),
    })
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf(d, na * nb / (na + nb)),
    })
}

fn energy_from_distances(dist: &[f64], n: usize, labels: &[bool]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    let (mut nxy, mut nxx, mut nyy) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[i * n + j];
            match (labels[i], labels[j]) {
                (true, true) => {
                    xx += d;
                    nxx += 1;
                }
                (false, false) => {
                    yy += d;
                    nyy += 1;
                }
                _ => {
                    xy += d;
                    nxy += 1;
                }
            }
        }
    }
    2.0 * xy / nxy as f64 - xx / nxx.max(1) as f64 - yy / nyy.max(1) as f64
}

/// Two-sample energy-distance permutation test on points in `R^d`.
pub fn energy_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples(
            "energy test needs two points per sample".into(),
        ));
    }
    let pts: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pts.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = crate::linalg::norm(&crate::linalg::sub(pts[i], pts[j]));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut labels: Vec<bool> = (0..n).map(|i| i < a.len()).collect();
    let observed = energy_from_distances(&dist, n, &labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0usize;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if energy_from_distances(&dist, n, &labels) >= observed {
            at_least += 1;
        }
    }
    Ok(TestResult {
        statistic: observed,
        p_value: (at_least + 1) as f64 / (permutations + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((std_dev(&xs) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(std_dev(&[1.0]), 0.0);
    }

    #[test]
    fn chi_square_perfect_fit_and_gross_misfit() {
        let r = chi_square_gof(&[25, 25, 25, 25], &[25.0; 4], 0).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square_gof(&[100, 0, 0, 0], &[25.0; 4], 0).unwrap();
        assert!(r.p_value < 1e-10);
        // 3 dof, statistic 7.815 is the 5% critical value.
        let e = [10.0, 10.0, 10.0, 10.0];
        let chi = chi_square_gof(&[15, 5, 12, 8], &e, 0).unwrap();
        assert!((chi.statistic - 5.8).abs() < 1e-12);
        assert!(chi.p_value > 0.05);
    }

    #[test]
    fn ks_detects_shift_and_accepts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        assert!(ks_one_sample(&xs, |x| x.clamp(0.0, 1.0)).unwrap().p_value > 0.01);
        assert!(ks_one_sample(&xs, |x| (x * x).clamp(0.0, 1.0)).unwrap().p_value < 1e-6);
        let ys: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&xs, &ys).unwrap().p_value < 1e-6);
        let zs: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        assert!(ks_two_sample(&xs, &zs).unwrap().p_value > 0.01);
    }

    #[test]
    fn kolmogorov_critical_value() {
        // λ = 1.358 is the 5% point of the limiting distribution.
        assert!((kolmogorov_sf(1.358 / 1e4, 1e8) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn energy_test_power_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cloud = |shift: f64| -> Vec<Vec<f64>> {
            (0..150)
                .map(|_| vec![rng.sample::<f64, _>(StandardNormal) + shift, rng.sample(StandardNormal)])
                .collect()
        };
        let a = cloud(0.0);
        let b = cloud(0.0);
        let c = cloud(0.6);
        assert!(energy_test(&a, &b, 200, 1).unwrap().p_value > 0.01);
        assert!(energy_test(&a, &c, 200, 1).unwrap().p_value < 0.01);
    }
}
