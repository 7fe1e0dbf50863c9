//! Seeded RNG streams.
//!
//! Every random choice in the toolkit draws from a stream derived from a
//! global seed plus string tags (utterance id, purpose, step index), so any
//! unit of work can be recomputed independently and runs are reproducible
//! regardless of execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the seed and tags. Stable across platforms and releases.
pub fn hash_tags(seed: u64, tags: &[&str]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in seed.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    for tag in tags {
        for byte in tag.as_bytes() {
            h ^= *byte as u64;
            h = h.wrapping_mul(PRIME);
        }
        // Separator so ("ab","c") differs from ("a","bc").
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// A ChaCha8 stream keyed by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_tags(seed, tags))
}
