//! Portable pseudo-random numbers.
//!
//! Everything seeded in this crate goes through [`Prng`]: xoshiro256++ seeded by
//! splitmix64 expansion of a 64-bit seed, with Gaussians drawn by the basic
//! Box–Muller transform in `f64`. No platform-dependent math is involved beyond
//! `ln`, `sqrt` and `cos`, so golden files stay reproducible.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// One splitmix64 step, also used to mix hashes with seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct Prng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        Prng::new(splitmix64(seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is negligible for the sizes used here
        // and the result is still fully deterministic.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let mut u1 = self.uniform();
        while u1 <= f64::MIN_POSITIVE {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal draw truncated to two standard deviations by resampling.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.gaussian();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
