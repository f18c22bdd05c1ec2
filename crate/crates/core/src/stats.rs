//! Error bars for correlated Monte Carlo series.

use serde::{Deserialize, Serialize};

/// Levels with fewer blocks than this are too noisy to judge a plateau.
const MIN_BLOCKS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockingResult {
    pub mean: f64,
    pub error: f64,
    /// Number of raw samples per block at the chosen level.
    pub block_size: usize,
    /// Whether the error estimate levelled off before blocks ran out.
    pub plateau: bool,
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error assuming independent samples.
pub fn naive_error(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    (var / (n - 1) as f64).sqrt()
}

/// Pairwise blocking: the error at each level is the naive error of the
/// block means. The reported level is the first one whose estimate agrees
/// with every later (sufficiently populated) level within two standard
/// errors of the error estimate itself.
pub fn blocking(x: &[f64]) -> BlockingResult {
    let m = mean(x);
    if x.len() < 2 {
        return BlockingResult {
            mean: m,
            error: 0.0,
            block_size: 1,
            plateau: false,
        };
    }
    let mut levels: Vec<(f64, f64, usize)> = Vec::new();
    let mut cur = x.to_vec();
    let mut size = 1;
    loop {
        let n = cur.len();
        let e = naive_error(&cur);
        let de = e / (2.0 * (n as f64 - 1.0)).sqrt();
        levels.push((e, de, size));
        if n / 2 < MIN_BLOCKS {
            break;
        }
        cur = cur.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        size *= 2;
    }
    for k in 0..levels.len() {
        let (ek, dek, sk) = levels[k];
        let stable = levels[k + 1..].iter().all(|&(ej, dej, _)| (ej - ek).abs() <= 2.0 * dej.max(dek));
        if stable && k + 1 < levels.len() {
            return BlockingResult {
                mean: m,
                error: ek,
                block_size: sk,
                plateau: true,
            };
        }
    }
    let (e, _, s) = levels.iter().copied().fold((0.0, 0.0, 1), |a, b| if b.0 > a.0 { b } else { a });
    BlockingResult {
        mean: m,
        error: e,
        block_size: s,
        plateau: false,
    }
}

/// A sample series stored as block means of bounded length. When the
/// buffer fills, adjacent blocks are merged and the block size doubles, so
/// memory stays fixed while blocking analysis remains possible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSeries {
    capacity: usize,
    block_size: usize,
    blocks: Vec<f64>,
    partial_sum: f64,
    partial_n: usize,
    total_sum: f64,
    total_n: usize,
}

impl Default for BlockSeries {
    fn default() -> Self {
        Self::new(1024)
    }
}

impl BlockSeries {
    /// `capacity` is rounded up to an even number of at least 2.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(2).next_multiple_of(2),
            block_size: 1,
            blocks: Vec::new(),
            partial_sum: 0.0,
            partial_n: 0,
            total_sum: 0.0,
            total_n: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.total_sum += x;
        self.total_n += 1;
        self.partial_sum += x;
        self.partial_n += 1;
        if self.partial_n >= self.block_size {
            self.flush();
        }
    }

    fn flush(&mut self) {
        self.blocks.push(self.partial_sum / self.partial_n as f64);
        self.partial_sum = 0.0;
        self.partial_n = 0;
        if self.blocks.len() >= self.capacity {
            self.compress();
        }
    }

    fn compress(&mut self) {
        let odd = (self.blocks.len() % 2 == 1).then(|| self.blocks.pop().unwrap());
        self.blocks = self.blocks.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        self.block_size *= 2;
        if let Some(v) = odd {
            // an unpaired block becomes a half-filled partial block
            self.partial_sum += v * (self.block_size / 2) as f64;
            self.partial_n += self.block_size / 2;
        }
    }

    pub fn len(&self) -> usize {
        self.total_n
    }

    pub fn is_empty(&self) -> bool {
        self.total_n == 0
    }

    pub fn mean(&self) -> f64 {
        if self.total_n == 0 {
            f64::NAN
        } else {
            self.total_sum / self.total_n as f64
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Appends `other` as if its samples had been pushed after ours. Block
    /// boundaries of the two series are aligned approximately.
    pub fn merge(&mut self, other: &BlockSeries) {
        let mut other = other.clone();
        while other.block_size < self.block_size {
            other.compress();
        }
        while self.block_size < other.block_size {
            self.compress();
        }
        for &b in &other.blocks {
            self.blocks.push(b);
            if self.blocks.len() >= self.capacity {
                self.compress();
            }
        }
        self.partial_sum += other.partial_sum;
        self.partial_n += other.partial_n;
        if self.partial_n >= self.block_size {
            self.flush();
        }
        self.total_sum += other.total_sum;
        self.total_n += other.total_n;
    }

    /// Blocking analysis over the stored blocks; the mean covers every
    /// sample, including an unfinished block.
    pub fn analyse(&self) -> BlockingResult {
        let mut r = blocking(&self.blocks);
        r.mean = self.mean();
        r.block_size *= self.block_size;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_series_has_zero_error() {
        let r = blocking(&[1.5; 1000]);
        assert_eq!(r.mean, 1.5);
        assert_eq!(r.error, 0.0);
        assert!(r.plateau);
    }

    #[test]
    fn independent_samples_match_naive_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1 << 14).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = blocking(&x);
        let naive = naive_error(&x);
        assert!((r.error / naive - 1.0).abs() < 0.15, "{} vs {}", r.error, naive);
    }

    /// AR(1) with coefficient ρ has integrated autocorrelation
    /// (1+ρ)/(1−ρ); blocking must recover the inflated error.
    #[test]
    fn correlated_series_error_is_inflated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho: f64 = 0.9;
        let n = 1 << 17;
        let mut x = Vec::with_capacity(n);
        let mut v = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            v = rho * v + (1.0 - rho * rho).sqrt() * z;
            x.push(v);
        }
        let r = blocking(&x);
        let expect = ((1.0 + rho) / (1.0 - rho) / n as f64).sqrt();
        assert!((r.error / expect - 1.0).abs() < 0.25, "{} vs {}", r.error, expect);
        assert!(r.block_size > 1);
    }

    #[test]
    fn block_series_bounds_memory_and_keeps_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut s = BlockSeries::new(256);
        x.iter().for_each(|&v| s.push(v));
        assert!(s.blocks.len() <= 256);
        assert!((s.mean() - mean(&x)).abs() < 1e-12);
        let r = s.analyse();
        assert!((r.error / naive_error(&x) - 1.0).abs() < 0.3, "{} vs {}", r.error, naive_error(&x));
    }

    #[test]
    fn merged_series_matches_sequential_mean() {
        let mut a = BlockSeries::new(16);
        let mut b = BlockSeries::new(16);
        let mut all = BlockSeries::new(16);
        for k in 0..300 {
            let v = (k as f64 * 0.37).sin();
            if k < 170 {
                a.push(v)
            } else {
                b.push(v)
            }
            all.push(v);
        }
        a.merge(&b);
        assert_eq!(a.len(), 300);
        assert!((a.mean() - all.mean()).abs() < 1e-12);
        assert!(a.blocks.len() <= 16);
    }
}
