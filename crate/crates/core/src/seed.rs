//! Deterministic seed derivation.
//!
//! Every random stream in the crate (per tree, per session, per Monte Carlo
//! repetition) is keyed off a root seed plus a path of integer tags, so the
//! values drawn never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `root`, one splitmix round per tag.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(root), |acc, &tag| {
        splitmix64(acc ^ splitmix64(tag))
    })
}

/// Hashes a string tag (participant ids, design names) into a seed tag.
pub fn tag_str(s: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tags))
}
