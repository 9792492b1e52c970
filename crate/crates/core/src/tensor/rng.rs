//! Seeded randomness.
//!
//! The generator is pinned so results reproduce from a `u64` seed alone:
//! xoshiro256++ expanded from the seed with SplitMix64 (the `seed_from_u64`
//! convention of `rand_xoshiro`). Standard normals come from the basic
//! Box–Muller transform on 53-bit uniforms, drawn as
//! `r = sqrt(-2 ln u1), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2)` with the
//! second value of each pair handed out before new draws.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Deterministic source of uniforms, normals and raw words.
pub struct GaussianSource {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl GaussianSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53-bit precision.
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Standard normal via Box–Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}
