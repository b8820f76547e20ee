//! Seeded, platform-independent randomness.
//!
//! [`SeededRng`] wraps ChaCha8 (`rand_chacha`), whose output stream is
//! fully specified, so a given seed yields the same draws on every
//! platform. Independent sub-streams are derived with [`SeededRng::derive`],
//! which is how per-episode and per-video seeds are produced without any
//! dependence on evaluation order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A generator for sub-stream `stream` of `seed`. Distinct streams of
    /// one seed never overlap.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> Real {
        self.inner.random::<f64>() as Real
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> Real {
        let z: f64 = self.inner.sample(StandardNormal);
        z as Real
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Fisher-Yates shuffle.
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
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SeededRng::derive(7, 0);
        let mut b = SeededRng::derive(7, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn known_first_draw_is_stable() {
        const FROZEN: u64 = 13080132717333068652;
        // Frozen from the first run; guards against a silent generator swap.
        let mut r = SeededRng::new(0);
        assert_eq!(r.next_u64(), FROZEN);
    }
}
