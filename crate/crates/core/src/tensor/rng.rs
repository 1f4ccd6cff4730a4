use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// ChaCha8-backed generator with an explicit 64-bit seed. Streams derived with
/// [`SeededRng::fork`] are independent of how much the parent has been used.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.inner)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    pub fn choose<'a, X>(&mut self, items: &'a [X]) -> Option<&'a X> {
        items.choose(&mut self.inner)
    }
}
