//! Deterministic, order-independent randomness.
//!
//! Every random draw in the crate is keyed by (seed, label, index) rather than
//! by call order, so parallel and serial execution produce identical results
//! no matter how a worker pool schedules particles. ChaCha streams serve the
//! heavyweight sampling; a splitmix-style counter hash serves the one-bit-per-
//! step ensemble dither where a full stream cipher would dominate the step cost.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The 64-bit finalizer from splitmix64. Full-period, passes avalanche tests.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a labeled stream (FNV-1a over the label, then mixed).
pub fn stream_key(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(mix64(seed ^ h).wrapping_add(index))
}

/// A ChaCha8 generator for the (seed, label, index) stream.
pub fn stream_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let key = stream_key(seed, label, index);
    let mut state = [0u8; 32];
    let mut z = key;
    for chunk in state.chunks_mut(8) {
        z = mix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(state)
}

/// 64 dither bits for one particle's steps [64*block, 64*block + 63].
#[inline]
pub fn dither_word(seed: u64, particle: u64, block: u64) -> u64 {
    mix64(mix64(seed ^ 0xD1F7_5E5E_0D17_AB6B ^ particle.rotate_left(17)).wrapping_add(block))
}
