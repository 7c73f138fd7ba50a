//! Seeded random streams.
//!
//! Every stochastic component draws from its own named substream of one
//! master seed, so changing how one component consumes randomness never
//! shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministically mixes a master seed with a stream name and indices.
pub fn derive_seed(master: u64, name: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ fnv1a(name));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn substream(master: u64, name: &str, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name, parts))
}
