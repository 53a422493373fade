//! Deterministic, splittable pseudo-randomness.
//!
//! Every random draw in the crate flows from a `(seed, stream)` pair. The
//! generator is ChaCha8 keyed by the seed with the stream id selecting an
//! independent keystream, so sequences do not depend on the order in which
//! streams are consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based generator identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive child stream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child generator for sub-task `key`, positioned at the
    /// start of its own stream regardless of how much of `self` was used.
    pub fn split(&self, key: u64) -> Rng {
        Rng::new(self.seed, mix64(self.stream ^ mix64(key)))
    }

    /// Child generator keyed by a path of indices, e.g. `[iteration, block]`.
    pub fn split_path(&self, keys: &[u64]) -> Rng {
        keys.iter().fold(self.clone(), |r, &k| r.split(k))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seed_and_stream_reproduce() {
        let mut a = Rng::new(42, 7);
        let mut b = Rng::new(42, 7);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::new(42, 0);
        let mut b = Rng::new(42, 1);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn split_is_order_independent() {
        let mut parent = Rng::new(3, 0);
        let before = parent.split(9).next_u64();
        for _ in 0..100 {
            parent.next_u64();
        }
        assert_eq!(before, parent.split(9).next_u64());
    }

    #[test]
    fn uniform_moments() {
        let mut r = Rng::new(1, 1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.uniform()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn independent_streams_uncorrelated() {
        let mut a = Rng::new(5, 10);
        let mut b = Rng::new(5, 11);
        let n = 20_000;
        let corr: f64 = (0..n).map(|_| a.normal() * b.normal()).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.03, "correlation {corr}");
    }
}
