//! Deterministic random streams.
//!
//! Every stochastic step in the pipeline (weight initialization, dropout
//! masks, batch shuffling, synthetic-scene noise) draws from its own
//! [`RngStream`]. A stream is a ChaCha8 generator seeded from a master seed
//! mixed with a string label, so the streams are mutually independent and a
//! run is reproducible bit for bit from the master seed alone. All
//! derivations from raw generator output (floats, bounded integers, normal
//! deviates) are implemented here explicitly so the draw sequences do not
//! depend on any library's distribution internals.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

/// Labels for the streams a training run consumes. Keeping them in one place
/// guarantees that two schemes draw identically whenever they perform the
/// same work in the same order.
pub mod labels {
    /// Autoencoder weight initialization.
    pub const INIT_AE: &str = "init/ae";
    /// Classifier weight initialization.
    pub const INIT_CLF: &str = "init/clf";
    /// Dropout masks inside the autoencoder.
    pub const DROPOUT_AE: &str = "dropout/ae";
    /// Dropout masks inside the classifier.
    pub const DROPOUT_CLF: &str = "dropout/clf";
    /// Per-epoch shuffling of training indices, shared by all components.
    pub const SHUFFLE: &str = "shuffle";
    /// Train/valid/test split assignment.
    pub const SPLIT: &str = "split";
}

/// FNV-1a over a byte string; folds stream labels into seed material.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; spreads seeds that differ in only a few bits.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A labeled deterministic random stream.
pub struct RngStream {
    rng: ChaCha8Rng,
    /// Box-Muller produces deviates in pairs; the second one waits here.
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Stream seeded directly from a 64-bit value.
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Stream derived from a master seed and a label such as
    /// [`labels::DROPOUT_CLF`].
    pub fn derive(master_seed: u64, label: &str) -> Self {
        Self::from_seed(splitmix64(master_seed ^ fnv1a64(label.as_bytes())))
    }

    /// Next raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.rng.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform index in `[0, n)` via rejection sampling.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a nonempty range");
        let n = n as u64;
        // Reject draws from the incomplete final copy of [0, n) so every
        // index is exactly equally likely.
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }

    /// Standard normal deviate via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        let r = (-2.0 * u.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * v).sin_cos();
        self.spare_normal = Some(r * sin);
        r * cos
    }
}
