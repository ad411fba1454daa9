//! Seed derivation helpers. Everything random in the crate flows from a
//! `ChaCha8Rng` seeded through these functions, so streams are stable across
//! platforms and releases of the standard library.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered list of seed components into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6D6F_7661_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// 64-bit FNV-1a.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Read `MOVA_SEED` if set and parseable.
pub fn env_seed() -> Option<u64> {
    std::env::var("MOVA_SEED").ok()?.trim().parse().ok()
}
