//! Deterministic seed derivation and Gaussian sampling.
//!
//! All randomness in the crate flows through explicitly seeded ChaCha
//! streams. Sub-streams are derived by mixing tag words into a base seed with
//! splitmix64, which is stable across platforms and toolchain versions, so a
//! derived stream is a pure function of its inputs.

use rand::Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix `tags` into `base` to obtain an independent sub-seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    h
}

/// Stable 64-bit hash of a byte string, for tagging seeds with identifiers.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// One standard normal draw via Box-Muller. Consumes exactly two uniform
/// draws from `rng`, so the stream position is a fixed function of the call
/// count.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
