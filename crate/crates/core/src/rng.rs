//! Indexed (counter-based) random draws.
//!
//! Every standard-normal draw is addressed by a seed, a stream id built from
//! the caller's indices (stage, sample, ...) and an element position. Each
//! element consumes a fixed window of four 32-bit ChaCha words, so draws do
//! not depend on the order in which elements are visited.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

const WORDS_PER_DRAW: u128 = 4;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a list of indices into one 64-bit key.
pub fn derive(seed: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(mix64(seed), |acc, &i| mix64(acc ^ mix64(i.wrapping_add(0x632B_E59B_D9B4_E019))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedNormal {
    seed: u64,
}

impl IndexedNormal {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn stream_rng(&self, stream: &[u64]) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(derive(0, stream));
        rng
    }

    /// The draw at `index` of `stream`.
    pub fn at(&self, stream: &[u64], index: u64) -> f64 {
        let mut rng = self.stream_rng(stream);
        rng.set_word_pos(index as u128 * WORDS_PER_DRAW);
        box_muller(rng.next_u64(), rng.next_u64())
    }

    /// Draws for indices `0..len` of `stream`; equal to calling [`Self::at`]
    /// for each index.
    pub fn fill(&self, stream: &[u64], len: usize) -> Vec<f64> {
        let mut rng = self.stream_rng(stream);
        (0..len)
            .map(|_| box_muller(rng.next_u64(), rng.next_u64()))
            .collect()
    }
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so the log below is finite.
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    let theta = std::f64::consts::TAU * ((b >> 11) as f64 * (1.0 / (1u64 << 53) as f64));
    r * theta.cos()
}
