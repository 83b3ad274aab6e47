//! Seeded, platform-independent random streams.
//!
//! Uniforms come from ChaCha8 (`rand_chacha`), whose output is specified
//! bit-for-bit. Gaussians use the Marsaglia polar method with `libm::log`,
//! so no platform libm is involved anywhere in the sample path.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::Grid2D;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `(self.seed, label)`.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(derive_seed(self.seed, label))
    }

    /// Independent stream for `(self.seed, label, index)`.
    pub fn derive_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            derive_seed(self.seed, label) ^ splitmix64(index),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        assert!(hi > lo);
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let k = (-2.0 * libm::log(s) / s).sqrt();
                self.spare = Some(v * k);
                return u * k;
            }
        }
    }

    pub fn normal_grid(&mut self, rows: usize, cols: usize) -> Grid2D {
        Grid2D::from_fn(rows, cols, |_, _| self.normal())
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn init_grid(&mut self, rows: usize, cols: usize, std: f64) -> Grid2D {
        Grid2D::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(0, i + 1);
            items.swap(i, j);
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over the label, folded with the seed through splitmix64.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}
