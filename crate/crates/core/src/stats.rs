//! Streaming moments, standard errors and falsification thresholds.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::scalar::Real;

/// Welford accumulator with Chan's pairwise merge.
///
/// Pushing identical values leaves the mean bit-identical to that value and
/// the second moment exactly zero, which the pinning checks rely on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningStats<T> {
    n: usize,
    mean: T,
    m2: T,
    m3: T,
    m4: T,
}

impl<T: Real> Default for RunningStats<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> RunningStats<T> {
    pub fn new() -> Self {
        Self { n: 0, mean: T::zero(), m2: T::zero(), m3: T::zero(), m4: T::zero() }
    }

    pub fn from_slice(xs: &[T]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.push(x);
        }
        s
    }

    pub fn push(&mut self, x: T) {
        let n1 = T::count(self.n);
        self.n += 1;
        let n = T::count(self.n);
        let delta = x - self.mean;
        if delta == T::zero() {
            return;
        }
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean = self.mean + delta_n;
        self.m4 = self.m4 + term1 * delta_n2 * (n * n - T::lit(3.0) * n + T::lit(3.0))
            + T::lit(6.0) * delta_n2 * self.m2
            - T::lit(4.0) * delta_n * self.m3;
        self.m3 = self.m3 + term1 * delta_n * (n - T::lit(2.0)) - T::lit(3.0) * delta_n * self.m2;
        self.m2 = self.m2 + term1;
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let na = T::count(self.n);
        let nb = T::count(other.n);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + T::lit(3.0) * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + T::lit(6.0) * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + T::lit(4.0) * delta * (na * other.m3 - nb * self.m3) / n;
        self.n += other.n;
        self.mean = mean;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance (zero for fewer than two samples).
    pub fn variance(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            self.m2 / T::count(self.n - 1)
        }
    }

    pub fn std_dev(&self) -> T {
        self.variance().sqrt()
    }

    /// Standard error of the mean: sample std / sqrt(n).
    pub fn stderr(&self) -> T {
        if self.n < 2 {
            T::zero()
        } else {
            self.std_dev() / T::count(self.n).sqrt()
        }
    }

    /// Large-sample standard error of the sample variance,
    /// `sqrt((mu4 - s^4) / n)` with the central fourth moment `mu4`.
    pub fn variance_stderr(&self) -> T {
        if self.n < 2 {
            return T::zero();
        }
        let n = T::count(self.n);
        let mu4 = self.m4 / n;
        let s2 = self.variance();
        ((mu4 - s2 * s2).max(T::zero()) / n).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.mean.as_f64(), stderr: self.stderr().as_f64(), n: self.n }
    }
}

/// A Monte Carlo estimate reduced to `f64` for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

/// z-score of `estimate - target` given its standard error.
///
/// A zero standard error yields `0` for an exact match and `±inf` otherwise.
pub fn z_score(diff: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        diff / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

pub fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Two-sided Bonferroni critical value: keeps the family-wise false alarm
/// rate of `cells` tests at the single-test rate of a `base` z threshold.
pub fn bonferroni_z(base: f64, cells: usize) -> f64 {
    if cells <= 1 {
        return base;
    }
    let normal = standard_normal();
    let tail = 1.0 - normal.cdf(base);
    let adjusted = tail / cells as f64;
    normal.inverse_cdf(1.0 - adjusted)
}

/// Standard error of an empirical frequency.
pub fn frequency_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identical_values_have_exact_mean_and_zero_stderr() {
        let x = 0.1f64 + 0.2;
        let mut s = RunningStats::new();
        for _ in 0..1001 {
            s.push(x);
        }
        assert_eq!(s.mean(), x);
        assert_eq!(s.stderr(), 0.0);
        let mut other = s;
        other.merge(&s);
        assert_eq!(other.mean(), x);
        assert_eq!(other.variance(), 0.0);
    }

    #[test]
    fn matches_two_pass_moments() {
        let xs: Vec<f64> = (0..257).map(|i| ((i * 37 % 101) as f64).sin() * 3.0 + 1.0).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mu4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;

        let whole = RunningStats::from_slice(&xs);
        assert_relative_eq!(whole.mean(), mean, epsilon = 1e-12);
        assert_relative_eq!(whole.variance(), var, epsilon = 1e-10);
        assert_relative_eq!(whole.m4 / n, mu4, epsilon = 1e-9);

        let mut merged = RunningStats::from_slice(&xs[..100]);
        merged.merge(&RunningStats::from_slice(&xs[100..]));
        assert_relative_eq!(merged.mean(), mean, epsilon = 1e-12);
        assert_relative_eq!(merged.variance(), var, epsilon = 1e-10);
        assert_relative_eq!(merged.m3, whole.m3, epsilon = 1e-8);
        assert_relative_eq!(merged.m4, whole.m4, epsilon = 1e-8);
    }

    #[test]
    fn bonferroni_is_identity_for_one_cell_and_grows() {
        assert_eq!(bonferroni_z(3.0, 1), 3.0);
        let z = bonferroni_z(3.0, 384);
        assert!(z > 4.3 && z < 4.7, "{z}");
    }

    #[test]
    fn z_score_conventions() {
        assert_eq!(z_score(0.0, 0.0), 0.0);
        assert_eq!(z_score(1.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(1.0, 0.5), 2.0);
    }
}
