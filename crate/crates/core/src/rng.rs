//! Deterministic per-task random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `id` of `base`, e.g. one per replication.
pub fn derive_seed(base: u64, id: u64) -> u64 {
    mix(mix(base) ^ mix(id.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// RNG owned by a single unit of work, keyed by `(base, tag, id)`.
pub fn stream(base: u64, tag: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(base, tag), id))
}
