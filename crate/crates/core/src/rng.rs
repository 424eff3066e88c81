//! Counter-based random streams.
//!
//! Every stream is a ChaCha20 keystream keyed by the 64-bit seed and selected
//! by a 64-bit stream id, so `(seed, stream)` pins the entire output sequence
//! regardless of how work is scheduled. Normals use Box–Muller on pairs of
//! 53-bit uniforms: `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`,
//! `r = sqrt(-2 ln u1)`, emitting `r cos(2π u2)` then `r sin(2π u2)`.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

/// Seed for an independent purpose-specific stream family.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    mix64(seed ^ mix64(purpose.wrapping_add(0xA076_1D64_78BD_642F)))
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    /// Independent child stream; the parent is left untouched.
    pub fn split(&self, id: u64) -> Self {
        Self::with_stream(self.seed, mix64(self.stream ^ mix64(id)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (n > 0), by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let (a, b) = self.normal_pair();
        self.spare = Some(b);
        a
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// I.i.d. N(0, 1) tensor drawn from `rng`.
pub fn sample_standard_normal(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(Error::invalid(format!(
            "cannot sample a zero-size shape {:?}",
            shape
        )));
    }
    let data = (0..n).map(|_| rng.normal()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}
