//! Seeded RNG wrapper used everywhere determinism matters.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derives an independent stream, e.g. per step or per layer.
    pub fn derive(&self, salt: u64) -> Self {
        let mut base = self.inner.clone();
        Rng { inner: ChaCha8Rng::seed_from_u64(base.next_u64() ^ salt.wrapping_mul(0x9e3779b97f4a7c15)) }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.inner.gen::<f64>()).max(f64::MIN_POSITIVE);
        let u2 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard Gumbel(0, 1).
    pub fn gumbel(&mut self) -> f64 {
        let u = self.inner.gen::<f64>().max(f64::MIN_POSITIVE);
        -(-u.ln()).ln()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
