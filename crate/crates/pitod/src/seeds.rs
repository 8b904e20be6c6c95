//! Deterministic seed derivation.
//!
//! Every source of randomness in a run flows from a single trial seed
//! through named streams, so any component can be re-run in isolation.
//! Streams are derived with a fixed splitmix64-style mix over the parent
//! seed, an FNV-1a hash of the stream tag, and a stream index. The scheme
//! uses only integer arithmetic and is therefore stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from `(parent, tag, index)`.
pub fn derive(parent: u64, tag: &str, index: u64) -> u64 {
    let a = mix(parent.wrapping_add(GOLDEN_GAMMA));
    let b = mix(a ^ fnv1a(tag));
    mix(b.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)))
}

/// Deterministic generator for a derived stream.
pub fn rng(parent: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parent, tag, index))
}
