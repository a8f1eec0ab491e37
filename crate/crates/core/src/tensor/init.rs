//! Seedable parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Deterministic parameter factory.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal with standard deviation `std`, resampled outside ±2σ.
    pub fn trunc_normal<S: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break S::from_f64_lossy(z * std);
            }
        })
    }

    pub fn weight<S: Real>(&mut self, shape: &[usize]) -> Tensor<S> {
        self.trunc_normal(shape, INIT_STD)
    }
}
