//! Seed derivation.
//!
//! Every random decision in the pipeline draws from a stream derived from one
//! base seed as `stream(base, purpose, index)`. A purpose is a short static
//! label ("init", "cutmix", "labeled-order", ...) and the index is the
//! sub-model id, epoch, or step the stream belongs to. Two streams with
//! different (purpose, index) pairs are independent for practical purposes,
//! and resuming from a checkpoint needs only (seed, epoch, step) to re-derive
//! every stream exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One deterministic RNG stream for a named purpose.
pub fn stream(base: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, purpose, index))
}

/// Mix (base, purpose, index) into a single 64-bit seed.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over the purpose label
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(base ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
