//! Seeded, splittable random streams.
//!
//! Backed by ChaCha20: the key is derived from the seed and each stream id
//! selects an independent keystream, so workers can draw from
//! `fork(worker_id)` without coordinating.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        let u: f64 = self.inner.random();
        low + (high - low) * u
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from `0..n`, returned sorted.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k.min(n));
        idx.sort_unstable();
        idx
    }

    pub fn draw(&mut self, dist: Distribution) -> f64 {
        match dist {
            Distribution::Uniform { low, high } => self.uniform(low, high),
            Distribution::Normal { mean, std } => self.normal(mean, std),
        }
    }

    pub fn tensor<T: Scalar>(&mut self, shape: Vec<usize>, dist: Distribution) -> Result<Tensor<T>> {
        rand_tensor(self, shape, dist)
    }
}

/// Fills a tensor of `shape` with draws from `dist`, in row-major order.
pub fn rand_tensor<T: Scalar>(rng: &mut Rng, shape: Vec<usize>, dist: Distribution) -> Result<Tensor<T>> {
    match dist {
        Distribution::Normal { std, .. } if !(std >= 0.0) => {
            return Err(Error::Config(format!("normal std must be >= 0, got {std}")))
        }
        Distribution::Uniform { low, high } if !(low <= high) => {
            return Err(Error::Config(format!("uniform bounds out of order: {low} > {high}")))
        }
        _ => {}
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.draw(dist))).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let d = Distribution::Normal { mean: 1.0, std: 2.0 };
        let a = Rng::new(42).tensor::<f64>(vec![4, 5], d).unwrap();
        let b = Rng::new(42).tensor::<f64>(vec![4, 5], d).unwrap();
        assert_eq!(a, b);
        let c = Rng::new(43).tensor::<f64>(vec![4, 5], d).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forks_are_independent_and_reproducible() {
        let root = Rng::new(9);
        let mut a = root.fork(1);
        let mut b = root.fork(2);
        let mut a2 = Rng::new(9).fork(1);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xa2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_eq!(xa, xa2);
    }

    #[test]
    fn degenerate_normal_is_constant() {
        let t = Rng::new(1)
            .tensor::<f64>(vec![10], Distribution::Normal { mean: 0.0, std: 0.0 })
            .unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(Rng::new(1)
            .tensor::<f64>(vec![1], Distribution::Normal { mean: 0.0, std: -1.0 })
            .is_err());
    }

    #[test]
    fn uniform_moments() {
        let mut rng = Rng::new(2024);
        let n = 1_000_000;
        let u = rng
            .tensor::<f64>(vec![n], Distribution::Uniform { low: 0.0, high: 1.0 })
            .unwrap();
        let mean = u.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() <= 0.002, "mean {mean}");

        let v = rng
            .tensor::<f64>(vec![n], Distribution::Uniform { low: -1.0, high: 1.0 })
            .unwrap();
        let m = v.data().iter().sum::<f64>() / n as f64;
        let var = v.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!((var - 1.0 / 3.0).abs() / (1.0 / 3.0) <= 0.02, "var {var}");
    }

    #[test]
    fn sample_indices_sorted_distinct() {
        let mut rng = Rng::new(5);
        let idx = rng.sample_indices(20, 7);
        assert_eq!(idx.len(), 7);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
