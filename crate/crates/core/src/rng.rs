//! Seeded randomness.
//!
//! Every stochastic choice in the crate (parameter init, batch selection,
//! rollout sampling, corpus generation) draws from a stream derived from a
//! base seed plus integer tags. Streams are stateless with respect to the
//! run: step k's stream is `derive(seed, &[TAG, k])`, so resuming a run at
//! step k replays the exact same draws without serializing RNG state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags. Each independent consumer of randomness gets its own tag so
/// streams never collide across purposes.
pub mod streams {
    pub const PARAM_INIT: u64 = 0x01;
    pub const SFT_BATCH: u64 = 0x02;
    pub const GRPO_BATCH: u64 = 0x03;
    pub const ROLLOUT: u64 = 0x04;
    pub const DECODE: u64 = 0x05;
    pub const PROTOTYPES: u64 = 0x06;
    pub const BIGRAM: u64 = 0x07;
    pub const UTTERANCE: u64 = 0x08;
    pub const SPLIT: u64 = 0x09;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a base seed with a sequence of tags into a new seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Deterministic RNG stream with the handful of distributions the crate
/// needs. The raw bit stream is ChaCha8; the distribution code is local so
/// draws stay reproducible across dependency upgrades.
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Stream for `(seed, tags...)`, see [`derive`].
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        Self::new(derive(seed, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]` without modulo bias.
    pub fn uniform_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "uniform_range: empty range {lo}..={hi}");
        let span = (hi - lo + 1) as u64;
        // widening-multiply rejection
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let x = self.next_u64();
            if x < zone {
                return lo + (x % span) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Draws an index from an (approximately normalized) probability vector
    /// by cumulative scan in index order.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.uniform();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        probs.len() - 1
    }

    /// `k` distinct indices from `0..n`, in random order (partial
    /// Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k={k} > n={n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.uniform_range(i, n - 1);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// FNV-1a over a byte slice; used for corpus/config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
