//! Seed derivation.
//!
//! Every random stream is keyed by `(master seed, component name, id)`:
//!
//! ```text
//! derive_seed(m, c, i) = splitmix64(splitmix64(m ^ fnv1a64(c)) ^ splitmix64(i + GOLDEN))
//! ```
//!
//! FNV-1a and SplitMix64 are fixed, platform-independent functions, so a stream
//! only changes when one of its three keys changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(master: u64, component: &str, id: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a64(component)) ^ splitmix64(id.wrapping_add(GOLDEN)))
}

pub fn stream(master: u64, component: &str, id: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, component, id))
}

/// Stable id for string keys such as instance ids.
pub fn key_id(key: &str) -> u64 {
    fnv1a64(key)
}
