//! Portable seeded normal stream.
//!
//! ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64`) produces `u64`
//! words; each word becomes a uniform `(x >> 11) * 2^-53` in `[0, 1)`.
//! Normals come in pairs from Box–Muller on `(u1, u2)`:
//! `r = sqrt(-2 ln(1 - u1))`, `n0 = r cos(2π u2)`, `n1 = r sin(2π u2)`.
//! Anything that reproduces ChaCha20's word stream reproduces every
//! workload in this crate.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha20Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(x) = self.spare.take() {
            return x;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
