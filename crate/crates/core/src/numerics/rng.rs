//! Seeded random streams keyed by `(seed, purpose_tag)`.
//!
//! Each purpose (data synthesis, fitting, sampling, ...) gets its own stream so
//! that switching one phase on or off never shifts the draws seen by another.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    purpose_tag: String,
    counter: u64,
    inner: ChaCha8Rng,
}

fn derive_key(seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"crdi-rng");
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.finalize().into()
}

impl RngStream {
    pub fn new(seed: u64, purpose_tag: impl Into<String>) -> Self {
        let purpose_tag = purpose_tag.into();
        let inner = ChaCha8Rng::from_seed(derive_key(seed, &purpose_tag));
        Self {
            seed,
            purpose_tag,
            counter: 0,
            inner,
        }
    }

    /// Independent child stream `"<tag>/<child>"` under the same seed.
    pub fn child(&self, child: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.purpose_tag, child))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose_tag(&self) -> &str {
        &self.purpose_tag
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer on the inclusive range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.next_u64();
            if v < zone {
                return lo + (v % span) as usize;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Pair of independent standard normals by the Box–Muller transform.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - u lies in (0, 1], so the logarithm is finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair().0;
        }
    }
}

/// i.i.d. standard normal tensor of the given shape.
pub fn gaussian(stream: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "gaussian draw needs a non-empty shape, got {shape:?}"
        )));
    }
    let mut data = vec![0.0; shape.iter().product()];
    stream.fill_normal(&mut data);
    Ok(Tensor::from_parts(shape.to_vec(), data))
}
