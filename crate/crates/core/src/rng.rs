//! Seeded random streams.
//!
//! Every stochastic step draws from a [`Rng`], a ChaCha8 generator keyed by a
//! 64-bit seed. ChaCha8 output is specified bit-for-bit, so a seed yields the
//! same sequence on every platform. Independent streams for different
//! purposes (synthesis, CV planning, balancing, initialization, dropout,
//! sampling) are obtained with [`derive_seed`], which folds a purpose tag and
//! a list of indices into the master seed through SplitMix64 finalization.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-stream seed from `(seed, tag, indices)`.
///
/// The tag bytes are absorbed with FNV-1a, then seed, tag hash and each index
/// are chained through [`mix64`]. Distinct tags or indices give unrelated seeds.
pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut tag_hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        tag_hash ^= u64::from(b);
        tag_hash = tag_hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut h = mix64(seed ^ mix64(tag_hash));
    for &i in indices {
        h = mix64(h ^ mix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Deterministic random stream (ChaCha8 keyed by a 64-bit seed).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a purpose tag and index path.
    pub fn derive(seed: u64, tag: &str, indices: &[u64]) -> Self {
        Self::new(derive_seed(seed, tag, indices))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Exponential draw with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
