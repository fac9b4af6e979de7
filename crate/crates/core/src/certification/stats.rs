use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{NdcError, Result};

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by one Halley step.
pub fn phi_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NdcError::arg(format!("phi_inverse needs 0 < p < 1, got {p}")));
    }
    #[allow(clippy::excessive_precision)]
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] =
        [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let x = if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Halley refinement; the error is taken on the smaller tail to keep precision.
    let e = if x > 0.0 { (1.0 - p) - 0.5 * erfc(x / std::f64::consts::SQRT_2) } else { phi(x) - p };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

fn check_counts(k: u64, n: u64) -> Result<()> {
    if n == 0 || k > n {
        return Err(NdcError::arg(format!("invalid binomial counts k = {k}, n = {n}")));
    }
    Ok(())
}

/// One-sided `1 − alpha` Clopper–Pearson lower bound on a binomial proportion:
/// the `alpha`-quantile of `Beta(k, n − k + 1)`, or 0 when `k = 0`.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    check_counts(k, n)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NdcError::arg(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `ln P(X = i)` for `X ~ Binomial(n, p)`.
fn ln_binom_pmf(i: u64, n: u64, p: f64) -> f64 {
    let (i, nf) = (i as f64, n as f64);
    ln_gamma(nf + 1.0) - ln_gamma(i + 1.0) - ln_gamma(nf - i + 1.0) + i * p.ln() + (nf - i) * (1.0 - p).ln()
}

/// `P(X ≥ k)` for `X ~ Binomial(n, p)`, summed exactly in log space.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let terms: Vec<f64> = (k..=n).map(|i| ln_binom_pmf(i, n, p)).collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}

/// Exact two-sided binomial test of `p = 1/2` given `k` successes in `n` trials.
pub fn binomial_test_two_sided(k: u64, n: u64) -> Result<f64> {
    check_counts(k, n)?;
    let extreme = k.max(n - k);
    if 2 * extreme == n {
        return Ok(1.0);
    }
    Ok((2.0 * binomial_upper_tail(extreme, n, 0.5)).min(1.0))
}

/// Maurer–Pontil empirical Bernstein lower bound on the mean of `[0, 1]` samples,
/// holding with probability at least `1 − delta`.
pub fn empirical_bernstein_lower(samples: &[f64], delta: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(NdcError::arg("empirical Bernstein bound needs at least 2 samples"));
    }
    if samples.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(NdcError::arg("empirical Bernstein samples must lie in [0, 1]"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(NdcError::arg(format!("delta must lie in (0, 1), got {delta}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let l = (2.0 / delta).ln();
    Ok(mean - (2.0 * var * l / nf).sqrt() - 7.0 * l / (3.0 * (nf - 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn phi_inverse_values() {
        assert_eq!(phi_inverse(0.5).unwrap(), 0.0);
        // mpmath: sqrt(2)*erfinv(2p-1) at 50 digits
        let table = [
            (0.9, 1.2815515655446004),
            (0.975, 1.959963984540054),
            (0.999, 3.090232306167813),
            (1e-10, -6.361340902404056),
            (0.02, -2.053748910631823),
            (0.933254300796991, 1.5004750241206365),
        ];
        for (p, q) in table {
            let v = phi_inverse(p).unwrap();
            assert!((v - q).abs() < 1e-9, "p = {p}: {v} vs {q}");
        }
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(phi_inverse(bad).is_err());
        }
    }

    #[test]
    fn clopper_pearson_values() {
        assert_eq!(clopper_pearson_lower(0, 50, 0.05).unwrap(), 0.0);
        let v = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((v - 0.001f64.powf(0.01)).abs() < 1e-10);
        // independent route: bisection on the exact binomial tail P(X ≥ 90 | p) = alpha
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if binomial_upper_tail(90, 100, mid) < 0.05 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = clopper_pearson_lower(90, 100, 0.05).unwrap();
        assert!((v - lo).abs() < 1e-9, "{v} vs {lo}");
        assert!((v - 0.8362823767241852).abs() < 1e-9);
        assert!(clopper_pearson_lower(5, 4, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 0, 0.05).is_err());
    }

    #[test]
    fn binomial_test_values() {
        assert_eq!(binomial_test_two_sided(5, 10).unwrap(), 1.0);
        // 2 · 2^-10
        assert!((binomial_test_two_sided(10, 10).unwrap() - 2.0 / 1024.0).abs() < 1e-15);
        assert!((binomial_test_two_sided(0, 10).unwrap() - 2.0 / 1024.0).abs() < 1e-15);
        // 2 · (1 + 10 + 45) / 1024
        assert!((binomial_test_two_sided(8, 10).unwrap() - 112.0 / 1024.0).abs() < 1e-13);
    }

    #[test]
    fn bernstein_constant_samples() {
        let s = vec![0.8; 50];
        let v = empirical_bernstein_lower(&s, 0.05).unwrap();
        assert!((v - (0.8 - 7.0 * (40.0f64).ln() / (3.0 * 49.0))).abs() < 1e-12);
        assert!(empirical_bernstein_lower(&[0.5], 0.05).is_err());
        assert!(empirical_bernstein_lower(&[0.5, 1.2], 0.05).is_err());
    }

    #[test]
    fn bernstein_coverage() {
        let mut misses = 0;
        for trial in 0..2000u64 {
            let mut r = rng::substream(3, &[trial]);
            let s: Vec<f64> = (0..500).map(|_| if r.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
            if empirical_bernstein_lower(&s, 0.05).unwrap() > 0.7 {
                misses += 1;
            }
        }
        assert!(misses <= 100, "{misses}");
    }

    proptest! {
        #[test]
        fn phi_inverse_symmetry_and_roundtrip(p in 1e-12f64..0.5) {
            let a = phi_inverse(p).unwrap();
            let b = phi_inverse(1.0 - p).unwrap();
            prop_assert!((a + b).abs() < 1e-8 * a.abs().max(1.0));
            prop_assert!(((phi(a) - p) / p).abs() < 1e-9);
        }

        #[test]
        fn clopper_pearson_monotone(n in 1u64..300, k in 0u64..300, a in 0.001f64..0.2) {
            let k = k.min(n);
            let v = clopper_pearson_lower(k, n, a).unwrap();
            prop_assert!((0.0..=k as f64 / n as f64 + 1e-12).contains(&v));
            if k < n {
                prop_assert!(clopper_pearson_lower(k + 1, n, a).unwrap() >= v);
            }
            prop_assert!(clopper_pearson_lower(k, n, (a * 2.0).min(0.99)).unwrap() >= v - 1e-12);
        }

        #[test]
        fn bernstein_below_mean(s in proptest::collection::vec(0.0f64..=1.0, 2..60), d in 0.01f64..0.5) {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            prop_assert!(empirical_bernstein_lower(&s, d).unwrap() <= mean);
        }
    }
}
