//! Seeded, counter-addressed RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, salt, index)`. Streams for distinct indices are independent, so
//! per-datum work can run in parallel and still reproduce bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby keys.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for a `(seed, salt, index)` key.
pub fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let a = mix64(seed ^ mix64(salt));
    let b = mix64(a ^ mix64(index));
    let c = mix64(b.wrapping_add(0xA076_1D64_78BD_642F));
    let d = mix64(c ^ 0xE703_7ED1_A0B4_28DB);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Salts namespacing the independent draw streams.
pub mod salt {
    pub const CONVERT: u64 = 0x01;
    pub const EVALUATE: u64 = 0x02;
    pub const FIG1: u64 = 0x03;
    pub const BLOBS: u64 = 0x04;
    pub const MC_PROPENSITY: u64 = 0x05;
    pub const SAMPLE_ACTION: u64 = 0x06;
    pub const SPLIT: u64 = 0x07;
    pub const COVERAGE: u64 = 0x08;
    pub const PROBLEM_GEN: u64 = 0x09;
}

/// Standard Gumbel draw, G(0, 1).
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}
