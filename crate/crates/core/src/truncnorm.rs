//! One-dimensional truncated normal sampling, stable in the far tails.

use rand::Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Below this standardized mass the inverse-CDF path loses too many digits
/// and rejection samplers take over.
pub const INVERSE_CDF_MIN_MASS: f64 = 1e-10;

/// Draws from `Normal(mu, sigma²)` restricted to `[lo, hi]`.
pub fn sample_truncnorm_1d(mu: f64, sigma: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(lo <= hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidInputs(format!(
            "bad normal parameters mu={mu}, sigma={sigma}"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let z = if a >= 0.0 {
        standard_upper(a, b, rng)
    } else if b <= 0.0 {
        -standard_upper(-b, -a, rng)
    } else {
        standard_straddling(a, b, rng)
    };
    Ok((mu + sigma * z).clamp(lo, hi))
}

/// `P(a ≤ Z ≤ b)` for a standard normal, accurate in the tails.
pub fn standard_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (erfc(a / SQRT2) - erfc(b / SQRT2))
    } else if b <= 0.0 {
        standard_mass(-b, -a)
    } else {
        1.0 - 0.5 * erfc(-a / SQRT2) - 0.5 * erfc(b / SQRT2)
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

// 0 ≤ a < b ≤ ∞
fn standard_upper(a: f64, b: f64, rng: &mut impl Rng) -> f64 {
    let qa = erfc(a / SQRT2);
    let qb = erfc(b / SQRT2);
    if 0.5 * (qa - qb) >= INVERSE_CDF_MIN_MASS {
        loop {
            let u: f64 = rng.random();
            let q = qa - u * (qa - qb);
            if q > 0.0 {
                let x = SQRT2 * erfc_inv(q);
                if x.is_finite() {
                    return x.clamp(a, b);
                }
            }
        }
    }
    if (b - a) * a < 1.0 {
        // Narrow interval: uniform proposal, density ratio ≥ e^{-1}.
        loop {
            let x = a + (b - a) * rng.random::<f64>();
            let u: f64 = rng.random();
            if u.ln() <= -0.5 * (x * x - a * a) {
                return x;
            }
        }
    }
    // Exponential proposal with the optimal rate.
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = -(1.0 - rng.random::<f64>()).ln() / alpha;
        let x = a + e;
        if x > b {
            continue;
        }
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (x - alpha) * (x - alpha) {
            return x;
        }
    }
}

// a < 0 < b
fn standard_straddling(a: f64, b: f64, rng: &mut impl Rng) -> f64 {
    let mass = standard_mass(a, b);
    if mass < INVERSE_CDF_MIN_MASS {
        loop {
            let x = a + (b - a) * rng.random::<f64>();
            let u: f64 = rng.random();
            if u.ln() <= -0.5 * x * x {
                return x;
            }
        }
    }
    // Φ(x) = ½ erfc(−x/√2)
    let pa = 0.5 * erfc(-a / SQRT2);
    let pb = 0.5 * erfc(-b / SQRT2);
    loop {
        let u: f64 = rng.random();
        let p = pa + u * (pb - pa);
        if p > 0.0 && p < 1.0 {
            let x = -SQRT2 * erfc_inv(2.0 * p);
            if x.is_finite() {
                return x.clamp(a, b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn draws(mu: f64, s: f64, lo: f64, hi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| sample_truncnorm_1d(mu, s, lo, hi, &mut rng).unwrap())
            .collect()
    }

    fn ks_stat(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn matches_truncated_cdf_in_bulk() {
        let nd = Normal::new(0.0, 1.0).unwrap();
        for (i, (mu, s, lo, hi)) in [
            (0.0, 1.0, -1.0, 2.0),
            (1.0, 2.0, 1.5, 9.0),
            (-3.0, 0.5, -4.0, -3.5),
            (0.0, 1.0, -0.1, 0.1),
        ]
        .into_iter()
        .enumerate()
        {
            let fa = nd.cdf((lo - mu) / s);
            let fb = nd.cdf((hi - mu) / s);
            let xs = draws(mu, s, lo, hi, 20_000, 100 + i as u64);
            assert!(xs.iter().all(|&x| (lo..=hi).contains(&x)));
            let d = ks_stat(xs, |x| (nd.cdf((x - mu) / s) - fa) / (fb - fa));
            // 1.63/sqrt(n) is the 1% critical value.
            assert!(d < 1.63 / (20_000f64).sqrt(), "case {i}: D={d}");
        }
    }

    #[test]
    fn far_tail_mean_follows_mills_ratio() {
        for a in [8.0, 12.0, 20.0, 38.0] {
            let xs = draws(0.0, 1.0, a, f64::INFINITY, 20_000, a as u64);
            assert!(xs.iter().all(|&x| x >= a && x.is_finite()));
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let expected = a + 1.0 / a - 2.0 / a.powi(3) + 10.0 / a.powi(5);
            // Excess over a is roughly Exp(a); its standard error is 1/(a sqrt(n)).
            assert!(
                (mean - expected).abs() < 5.0 / (a * (20_000f64).sqrt()),
                "a={a}: {mean} vs {expected}"
            );
        }
    }

    #[test]
    fn lower_tail_is_mirror_image() {
        let up = draws(0.0, 1.0, 9.0, 10.0, 5000, 7);
        let down = draws(0.0, 1.0, -10.0, -9.0, 5000, 7);
        for (u, d) in up.iter().zip(&down) {
            assert_eq!(*u, -*d);
        }
    }

    #[test]
    fn narrow_far_interval_is_uniformish() {
        let xs = draws(0.0, 1.0, 30.0, 30.001, 20_000, 8);
        assert!(xs.iter().all(|&x| (30.0..=30.001).contains(&x)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        // Density ∝ e^{-30 t} on [0, 0.001]: nearly flat with a slight tilt.
        let t = 0.001;
        let k = 30.0f64;
        let exact = 30.0 + 1.0 / k - t * (-k * t).exp() / (1.0 - (-k * t).exp());
        assert!((mean - exact).abs() < 1e-5);
    }

    #[test]
    fn degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_truncnorm_1d(0.0, 1.0, 2.0, 2.0, &mut rng).unwrap(), 2.0);
        assert!(matches!(
            sample_truncnorm_1d(0.0, 1.0, 2.0, 1.0, &mut rng),
            Err(Error::EmptyInterval { .. })
        ));
        assert!(sample_truncnorm_1d(0.0, 0.0, 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn standard_mass_against_normal_cdf() {
        let nd = Normal::new(0.0, 1.0).unwrap();
        for (a, b) in [(-1.0, 1.0), (0.5, 2.0), (-3.0, -0.2), (-0.3, 8.0)] {
            let m = standard_mass(a, b);
            assert!((m - (nd.cdf(b) - nd.cdf(a))).abs() < 1e-14);
        }
        assert!(standard_mass(30.0, 31.0) > 0.0);
    }
}
