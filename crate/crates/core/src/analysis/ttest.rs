//! Welch two-sample t-test, Cohen's d and normal-approximation power.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::AnalysisError;
use crate::util::{mean, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub day: usize,
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    pub cohen_d: f64,
    /// Post-hoc power at `alpha` for the observed `d` and sample sizes.
    pub power: f64,
    /// `mean(a) − mean(b)`.
    pub mean_difference: f64,
    /// `1 − alpha` confidence interval of the mean difference.
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub alpha: f64,
    pub significant: bool,
}

/// Welch's t-test of `a` against `b`.
///
/// Errors with [`AnalysisError::DegenerateSample`] when either sample has
/// fewer than two values, a value is not finite, or both samples have zero
/// variance (the statistic is undefined).
pub fn welch_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult, AnalysisError> {
    if a.len() < 2 || b.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AnalysisError::DegenerateSample);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(AnalysisError::DegenerateSample);
    }
    let se = se2.sqrt();
    let diff = mean(a) - mean(b);
    let t = diff / se;
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    let p_value = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    let critical = dist.inverse_cdf(1.0 - alpha / 2.0);

    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let cohen_d = if pooled > 0.0 { diff / pooled } else { 0.0 };

    Ok(TestResult {
        day: 0,
        t,
        df,
        p_value,
        cohen_d,
        power: power_two_sided(cohen_d, a.len(), b.len(), alpha),
        mean_difference: diff,
        ci_low: diff - critical * se,
        ci_high: diff + critical * se,
        n_a: a.len(),
        n_b: b.len(),
        alpha,
        significant: p_value < alpha,
    })
}

/// Two-sided power of a two-sample test under the normal approximation:
/// `Φ(λ − z) + Φ(−λ − z)` with `λ = |d|·√(n_a n_b / (n_a + n_b))`,
/// `z = Φ⁻¹(1 − α/2)`.
pub fn power_two_sided(d: f64, n_a: usize, n_b: usize, alpha: f64) -> f64 {
    if n_a == 0 || n_b == 0 {
        return 0.0;
    }
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let (na, nb) = (n_a as f64, n_b as f64);
    let lambda = d.abs() * (na * nb / (na + nb)).sqrt();
    (normal.cdf(lambda - z) + normal.cdf(-lambda - z)).clamp(0.0, 1.0)
}

/// Smallest equal per-group size reaching `target` power, or `None` when
/// `d` is zero or the search exceeds `10⁹`.
pub fn sample_size_per_group(d: f64, alpha: f64, target: f64) -> Option<usize> {
    if d == 0.0 || !(0.0..1.0).contains(&target) {
        return None;
    }
    let reaches = |n: usize| power_two_sided(d, n, n, alpha) >= target;
    let mut hi = 2usize;
    while !reaches(hi) {
        hi *= 2;
        if hi > 1_000_000_000 {
            return None;
        }
    }
    let mut lo = 1usize;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}
