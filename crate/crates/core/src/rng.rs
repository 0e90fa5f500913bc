//! Seeded, splittable random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream)`, so
//! results never depend on the order in which independent work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Stream identifiers used across the crate. Keeping them here avoids
/// accidental reuse of one stream for two purposes.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PSEUDO_INPUTS: u64 = 3;
    pub const FEATURES: u64 = 4;
    /// Per-iteration training noise: `TRAIN_NOISE_BASE + iteration`.
    pub const TRAIN_NOISE_BASE: u64 = 1 << 32;
    /// Per-epoch minibatch order: `EPOCH_BASE + epoch`.
    pub const EPOCH_BASE: u64 = 2 << 32;
    /// Per-sample phantom factors: `PHANTOM_BASE + index`.
    pub const PHANTOM_BASE: u64 = 3 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}

/// Source of standard-normal noise for reparameterised sampling.
///
/// `scale` multiplies every draw; zero yields the distribution mean.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    scale: f64,
}

impl NoiseSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseSource {
            rng: stream_rng(seed, stream),
            scale: 1.0,
        }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        NoiseSource { rng, scale: 1.0 }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn draw<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let t: Tensor<T> = normal_tensor(&mut self.rng, shape);
        if self.scale == 1.0 {
            t
        } else {
            let s = T::lit(self.scale);
            t.map(|v| v * s)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
