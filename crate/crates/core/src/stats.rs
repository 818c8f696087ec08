//! Counting-statistics primitives shared across the crate.
//!
//! Photon-count probabilities are evaluated in log space throughout so
//! that records with tens of thousands of bins cannot underflow. The
//! negative binomial is parameterized by `(mean, dispersion)` with
//! `variance = dispersion * mean`, i.e. `r = mean / (dispersion - 1)`
//! and `p = 1 / dispersion`; at `dispersion = 1` it degenerates to the
//! Poisson distribution of the same mean.

use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

/// Which per-bin count distribution to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmfKind {
    Poisson,
    NegBinomial,
}

/// P(K = k) for the requested distribution.
///
/// `dispersion` is ignored for Poisson; for the negative binomial it must
/// be >= 1 (the Fano-like factor `f` with variance `f * mean`).
pub fn pmf(kind: PmfKind, mean: f64, dispersion: f64, k: u64) -> Result<f64> {
    if !(mean >= 0.0) {
        return Err(Error::invalid(format!("pmf mean must be >= 0, got {mean}")));
    }
    match kind {
        PmfKind::Poisson => Ok(ln_poisson_pmf(mean, k).exp()),
        PmfKind::NegBinomial => {
            if !(dispersion >= 1.0) {
                return Err(Error::invalid(format!(
                    "negative binomial dispersion must be >= 1, got {dispersion}"
                )));
            }
            Ok(ln_neg_binomial_pmf(mean, dispersion, k).exp())
        }
    }
}

/// log P(K = k) for Poisson(mean). mean = 0 is the point mass at zero.
pub fn ln_poisson_pmf(mean: f64, k: u64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    kf * mean.ln() - mean - ln_factorial(k)
}

/// log P(K = k) for the (mean, dispersion) negative binomial.
///
/// The binomial-coefficient term is accumulated as a product-log sum for
/// moderate k, which stays accurate even when `r = mean/(f-1)` is huge
/// (the near-Poisson limit) where a difference of two large `ln Γ` values
/// would lose precision.
pub fn ln_neg_binomial_pmf(mean: f64, dispersion: f64, k: u64) -> f64 {
    debug_assert!(dispersion >= 1.0);
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if dispersion == 1.0 {
        return ln_poisson_pmf(mean, k);
    }
    let r = mean / (dispersion - 1.0);
    let ln_p = -dispersion.ln(); // p = 1/f
    let ln_q = (1.0 - 1.0 / dispersion).ln(); // 1-p = (f-1)/f
    let ln_comb = if k <= 16_384 {
        // sum of ln((r + i) / (i + 1)) for i in 0..k
        let mut acc = 0.0;
        for i in 0..k {
            let i = i as f64;
            acc += ((r + i) / (i + 1.0)).ln();
        }
        acc
    } else {
        ln_gamma(k as f64 + r) - ln_gamma(r) - ln_factorial(k)
    };
    ln_comb + r * ln_p + k as f64 * ln_q
}

pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Numerically stable log(exp(a) + exp(b)).
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Stable log Σ exp(x_i) over a slice.
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - hi).exp()).sum();
    hi + sum.ln()
}

/// Two-sided standard normal quantile for a central confidence level,
/// e.g. level = 0.95 gives z ≈ 1.96.
pub fn normal_two_sided_z(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    n.inverse_cdf(0.5 + level / 2.0)
}

/// Wilson score interval for a binomial proportion.
///
/// Always contains the point estimate `successes / n`.
pub fn wilson_interval(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid("wilson_interval requires n >= 1"));
    }
    if successes > n {
        return Err(Error::invalid(format!(
            "wilson_interval: successes {successes} > n {n}"
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must be in (0,1), got {level}"
        )));
    }
    let z = normal_two_sided_z(level);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Kolmogorov–Smirnov statistic of `samples` against a reference CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let hi = (i as f64 + 1.0) / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Asymptotic KS critical value at significance `alpha` (1%, 5%).
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    let c = if alpha <= 0.01 { 1.628 } else { 1.358 };
    c / (n as f64).sqrt()
}

/// Sample mean and (unbiased) variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}
