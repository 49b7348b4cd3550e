//! The one random source used across the crate.
//!
//! `SeedRng` is ChaCha8 seeded through `rand_core`'s `seed_from_u64`. Every
//! derived quantity is defined in terms of `next_u64` so that traces can be
//! reproduced bit-for-bit by anything else implementing the same steps:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `index(n)` = high 64 bits of `next_u64() * n` (multiply-shift, no rejection)
//! * `normal()` = Box-Muller on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; one draw per pair, no caching
//! * `shuffle` = Fisher-Yates from the back, `j = index(i + 1)`
//!
//! Independent streams (bootstrap replicates, per-view maps) use
//! `SeedRng::stream(seed, id)`, which selects ChaCha stream `id` under the same
//! key, so results never depend on the order streams are consumed in.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeedRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn exponential(&mut self, mean: f64) -> f64 {
        -(1.0 - self.uniform()).ln() * mean
    }

    /// Poisson draw by counting unit-rate exponential arrivals before `lambda`.
    pub fn poisson(&mut self, lambda: f64) -> usize {
        let mut count = 0;
        let mut t = self.exponential(1.0);
        while t < lambda {
            count += 1;
            t += self.exponential(1.0);
        }
        count
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
