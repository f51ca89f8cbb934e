//! Seeded random source.
//!
//! Backed by ChaCha8, a counter-mode stream cipher, so a given seed and call
//! sequence produce the same stream on every platform.

use rand::seq::{index, SliceRandom};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative std {std}")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| mean + std * self.standard_normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Uniform random permutation of `0..n`.
    pub fn shuffle(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.inner);
        p
    }

    /// `amount` distinct indices from `0..n`, in random order.
    pub fn sample_without_replacement(&mut self, n: usize, amount: usize) -> Result<Vec<usize>> {
        if amount > n {
            return Err(Error::InvalidArgument(format!("cannot draw {amount} of {n} without replacement")));
        }
        Ok(index::sample(&mut self.inner, n, amount).into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_mean() {
        let t = Rng::new(3).normal(&[4, 2], 1.25, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).normal(&[16], 0.0, 1.0).unwrap();
        let b = Rng::new(42).normal(&[16], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Rng::new(43).normal(&[16], 0.0, 1.0).unwrap());
        assert_ne!(Rng::derive(42, 1).shuffle(20), Rng::derive(42, 2).shuffle(20));
    }

    #[test]
    fn shuffle_is_permutation() {
        assert_eq!(Rng::new(9).shuffle(1), vec![0]);
        assert!(Rng::new(9).shuffle(0).is_empty());
        let mut p = Rng::new(9).shuffle(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_roughly_uniform() {
        // position of element 0 over many shuffles of 4
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 4];
        for _ in 0..8000 {
            let p = rng.shuffle(4);
            counts[p.iter().position(|&v| v == 0).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 - 2000.0).abs() < 4.0 * (8000.0f64 * 0.25 * 0.75).sqrt());
        }
    }

    #[test]
    fn negative_std_rejected() {
        assert!(Rng::new(0).normal(&[2], 0.0, -1.0).is_err());
    }
}
