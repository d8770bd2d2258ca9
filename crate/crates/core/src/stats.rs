//! Small estimation helpers shared by the Monte Carlo modules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::replica_rng;
use rand_chacha::ChaCha8Rng;

/// Normal quantile for a two-sided 99% interval.
pub const Z99: f64 = 2.575_829_303_548_901;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0, ci_lo: value, ci_hi: value }
    }

    /// Normal-approximation 99% interval.
    pub fn normal(value: f64, stderr: f64) -> Self {
        Estimate { value, stderr, ci_lo: value - Z99 * stderr, ci_hi: value + Z99 * stderr }
    }

    /// Half width of the interval (larger side).
    pub fn half_width(&self) -> f64 {
        (self.value - self.ci_lo).max(self.ci_hi - self.value)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_lo <= x && x <= self.ci_hi
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Standard error of the mean of a correlated sequence by batch means.
pub fn batch_means_stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return f64::INFINITY;
    }
    let b = ((n as f64).sqrt() as usize).max(2);
    let batches: Vec<f64> = xs.chunks_exact(n / b).map(mean).collect();
    mean_stderr(&batches).1
}

/// Linear-interpolated quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Run `resamples` bootstrap replicates in parallel on independent streams.
/// Non-finite replicate values are dropped.
pub fn bootstrap<F>(resamples: usize, seed: u64, f: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let mut out: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| f(&mut replica_rng(seed, i as u64)))
        .collect();
    out.retain(|x| x.is_finite());
    out
}

/// Percentile interval around a point estimate at the given two-sided level.
pub fn percentile_estimate(point: f64, replicates: &[f64], level: f64) -> Estimate {
    let mut s = replicates.to_vec();
    s.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    let (_, sd) = if s.len() >= 2 { mean_sd(&s) } else { (point, f64::INFINITY) };
    Estimate {
        value: point,
        stderr: sd,
        ci_lo: quantile_sorted(&s, a).min(point),
        ci_hi: quantile_sorted(&s, 1.0 - a).max(point),
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (m, var.sqrt())
}

/// Multinomial resample of `counts`: returns new counts with the same total.
pub fn resample_counts(counts: &[u64], rng: &mut ChaCha8Rng) -> Vec<u64> {
    use rand_distr::{Binomial, Distribution};
    let mut left: u64 = counts.iter().sum();
    let mut mass_left = left as f64;
    let mut out = vec![0u64; counts.len()];
    for (i, &c) in counts.iter().enumerate() {
        if left == 0 {
            break;
        }
        let p = (c as f64 / mass_left).clamp(0.0, 1.0);
        let k = if p >= 1.0 { left } else { Binomial::new(left, p).map(|b| b.sample(rng)).unwrap_or(0) };
        out[i] = k;
        left -= k;
        mass_left -= c as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile_sorted(&s, 0.0), 0.0);
        assert_eq!(quantile_sorted(&s, 1.0), 3.0);
        assert!((quantile_sorted(&s, 0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn resample_preserves_total() {
        let mut rng = replica_rng(3, 0);
        let c = [5, 0, 12, 1, 100];
        let r = resample_counts(&c, &mut rng);
        assert_eq!(r.iter().sum::<u64>(), 118);
        assert_eq!(r[1], 0);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let (m, s) = mean_stderr(&[2.0; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 0.0);
    }
}
