//! Finite-ensemble fluctuations of aggregate consumption.
//!
//! For `n` independent devices drawn from `rho`, the mean consumption per
//! device tends to a normal law with the moments of [`aggregate_moments`].

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateMoments {
    pub mean: f64,
    /// Variance of the size-`n` sample mean.
    pub variance: f64,
    pub n: usize,
}

pub fn aggregate_moments(rho: &[f64], s: &[f64], n: usize) -> AggregateMoments {
    let mean: f64 = rho.iter().zip(s).map(|(r, s)| r * s).sum();
    let spread: f64 = rho
        .iter()
        .zip(s)
        .map(|(r, s)| (s - mean) * (s - mean) * r)
        .sum();
    AggregateMoments {
        mean,
        variance: spread / n.max(1) as f64,
        n,
    }
}

/// Apparent power of each state, `sqrt(p^2 + q^2)`.
pub fn apparent_power(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter().zip(q).map(|(p, q)| libm::hypot(*p, *q)).collect()
}

/// Sample mean of `s` over `n` states drawn i.i.d. from `rho`.
pub fn sample_aggregate(rho: &[f64], s: &[f64], n: usize, seed: u64) -> f64 {
    sample_replicate(rho, s, n, seed, 0)
}

/// Like [`sample_aggregate`], drawing from stream `replicate` of the seed so
/// replicates are independent and can run in any order.
pub fn sample_replicate(rho: &[f64], s: &[f64], n: usize, seed: u64, replicate: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let sampler = Sampler::new(rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let mut total = 0.0;
    for _ in 0..n {
        total += s[sampler.draw(&mut rng)];
    }
    total / n as f64
}

/// Mean and (population) variance of a sample.
pub fn empirical_moments(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and
/// the normal law with the given mean and standard deviation.
pub fn ks_distance_normal(samples: &[f64], mean: f64, sd: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut z: Vec<f64> = samples.iter().copied().collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let mut worst: f64 = 0.0;
    for (k, x) in z.iter().enumerate() {
        let cdf = if sd > 0.0 {
            0.5 * (1.0 + libm::erf((x - mean) / (sd * core::f64::consts::SQRT_2)))
        } else if *x < mean {
            0.0
        } else {
            1.0
        };
        let below = k as f64 / n;
        let above = (k + 1) as f64 / n;
        worst = worst.max((cdf - below).abs()).max((above - cdf).abs());
    }
    worst
}

/// Inverse-CDF sampler over a discrete distribution.
struct Sampler {
    cdf: Vec<f64>,
    last: usize,
}

impl Sampler {
    fn new(rho: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf: Vec<f64> = rho
            .iter()
            .map(|r| {
                acc += r.max(0.0);
                acc
            })
            .collect();
        let last = rho.iter().rposition(|&r| r > 0.0).unwrap_or(0);
        Sampler { cdf, last }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = self.cdf.last().copied().unwrap_or(0.0);
        let u = rng.random::<f64>() * total;
        let k = self.cdf.partition_point(|&c| c <= u);
        k.min(self.last)
    }
}
