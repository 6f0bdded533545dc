//! Named-stream RNG splitting.
//!
//! Every source of randomness in a run derives from one top-level seed
//! expanded into independent named streams (`"data/source"`, `"init/backbone"`,
//! `"batch/target"`, ...). Two streams with different names never overlap, and
//! a stream's sequence depends only on `(seed, name)`, so any stage of a
//! pipeline can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive the RNG for a named stream under a top-level seed.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

// FNV-1a; stable across platforms, good enough to keep stream ids distinct.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
