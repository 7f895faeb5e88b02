use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), values).expect("valid shape")
    }

    /// `[fan_in, fan_out]` weight with std `1/sqrt(fan_in)`.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn embedding(&mut self, shape: &[usize]) -> Tensor {
        self.normal(shape, EMBEDDING_STD)
    }
}

pub const EMBEDDING_STD: f64 = 0.5;

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![1.0; n]).expect("valid shape")
}
