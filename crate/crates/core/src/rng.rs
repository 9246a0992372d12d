//! Seeded generator used for synthetic tokens and weight initialization.
//!
//! ChaCha8 (`rand_chacha`) produces a platform-independent stream for a given
//! seed. Independent components draw from separate ChaCha streams of the same
//! seed via [`Rng::derive`], so adding a consumer never perturbs another one.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for stream `stream` of `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// `amount` distinct indices from `0..len`, sorted ascending.
    pub fn sample_without_replacement(&mut self, len: usize, amount: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.inner, len, amount.min(len)).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Named stream identifiers.
pub(crate) mod streams {
    pub const TOKENS: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const HEADS: u64 = 3;
    pub const KEYFRAMES: u64 = 4;
    pub const COMPRESSOR: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = {
            let mut r = Rng::new(42);
            (0..16).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = Rng::new(42);
            (0..16).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);
        let mut c = Rng::derive(42, streams::WEIGHTS);
        assert_ne!(a[0], c.normal());
    }

    #[test]
    fn sampling_is_sorted_and_unique() {
        let mut r = Rng::new(9);
        let s = r.sample_without_replacement(50, 7);
        assert_eq!(s.len(), 7);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
