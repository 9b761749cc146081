//! Scalar Monte-Carlo estimates and order-stable reductions.

use serde::{Deserialize, Serialize};

/// A Monte-Carlo (or exact) scalar with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
    pub method: String,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64, n: u64, method: impl Into<String>) -> Self {
        debug_assert!(stderr >= 0.0 && n >= 1);
        Self { value, stderr, n, method: method.into() }
    }

    pub fn exact(value: f64, method: impl Into<String>) -> Self {
        Self::new(value, 0.0, 1, method)
    }

    /// Sample mean and standard error of the mean.
    pub fn from_samples(samples: &[f64], method: impl Into<String>) -> Self {
        let n = samples.len().max(1);
        let mean = kahan_sum(samples.iter().copied()) / n as f64;
        let var = if samples.len() > 1 { kahan_sum(samples.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64 } else { 0.0 };
        Self::new(mean, (var / n as f64).sqrt(), n as u64, method)
    }

    /// `|self - other| / sqrt(se_a^2 + se_b^2)`; infinite if both are exact and differ.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        z_score(self.value - other.value, self.stderr, other.stderr)
    }

    /// Inverse-variance weighted merge. Falls back to the plain mean when
    /// any input has zero standard error.
    pub fn merge(parts: &[Estimate]) -> Estimate {
        assert!(!parts.is_empty());
        let n: u64 = parts.iter().map(|e| e.n).sum();
        let method = parts[0].method.clone();
        if parts.iter().any(|e| e.stderr <= 0.0) {
            let v = kahan_sum(parts.iter().map(|e| e.value)) / parts.len() as f64;
            return Estimate::new(v, 0.0, n, method);
        }
        let wsum = kahan_sum(parts.iter().map(|e| 1.0 / (e.stderr * e.stderr)));
        let v = kahan_sum(parts.iter().map(|e| e.value / (e.stderr * e.stderr))) / wsum;
        Estimate::new(v, (1.0 / wsum).sqrt(), n, method)
    }
}

pub fn z_score(diff: f64, se_a: f64, se_b: f64) -> f64 {
    let se = (se_a * se_a + se_b * se_b).sqrt();
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff.abs() / se
    }
}

/// Kahan–Babuska compensated summation.
pub fn kahan_sum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Ratio estimator `sum(num) / sum(den)` with a batch-means standard error
/// (delta method over `batches` contiguous batches).
pub fn batch_ratio(num: &[f64], den: &[f64], batches: usize) -> Option<(f64, f64)> {
    assert_eq!(num.len(), den.len());
    let n = num.len();
    let total_den = kahan_sum(den.iter().copied());
    if total_den == 0.0 {
        return None;
    }
    let ratio = kahan_sum(num.iter().copied()) / total_den;
    let b = batches.min(n).max(2);
    let len = n / b;
    if len == 0 {
        return Some((ratio, f64::INFINITY));
    }
    let mut resid = Vec::with_capacity(b);
    let mut den_means = Vec::with_capacity(b);
    for i in 0..b {
        let lo = i * len;
        let hi = if i == b - 1 { n } else { lo + len };
        let fb = kahan_sum(num[lo..hi].iter().copied()) / (hi - lo) as f64;
        let gb = kahan_sum(den[lo..hi].iter().copied()) / (hi - lo) as f64;
        resid.push(fb - ratio * gb);
        den_means.push(gb);
    }
    let gbar = kahan_sum(den_means.iter().copied()) / b as f64;
    let s2 = kahan_sum(resid.iter().map(|r| r * r)) / (b - 1) as f64;
    Some((ratio, (s2 / b as f64).sqrt() / gbar.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive() {
        let xs: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(1e-16, 10_000)).collect();
        assert!((kahan_sum(xs.iter().copied()) - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn merge_weights_by_inverse_variance() {
        let a = Estimate::new(1.0, 1.0, 10, "mc");
        let b = Estimate::new(2.0, 0.5, 10, "mc");
        let m = Estimate::merge(&[a, b]);
        assert!((m.value - 1.8).abs() < 1e-12);
        assert!((m.stderr - (0.2f64).sqrt()).abs() < 1e-12);
        assert_eq!(m.n, 20);
    }

    #[test]
    fn ratio_of_identical_series_is_one() {
        let xs: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        let (r, se) = batch_ratio(&xs, &xs, 32).unwrap();
        assert_eq!(r, 1.0);
        assert!(se.abs() < 1e-12);
        assert!(batch_ratio(&xs, &vec![0.0; 1000], 32).is_none());
    }
}
