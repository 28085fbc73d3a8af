//! Deterministic random streams.
//!
//! All randomness is drawn from ChaCha8 streams keyed by a global seed, a
//! purpose domain and up to two indices (typically member and layer). A
//! member's stream never depends on how many other members exist, which is
//! what lets a population run be replayed one member at a time.

use alloc::vec::Vec;

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Stream domains. Distinct domains never share a stream for the same indices.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const UPDATE: u64 = 2;
    pub const EXPLORE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const ENV: u64 = 5;
    pub const EVOLVE: u64 = 6;
    pub const BENCH: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(splitmix64((a << 32) ^ b ^ (domain << 56)));
    rng
}

/// One stream per member, `member_streams(seed, d, n)[i] == stream(seed, d, i, 0)`.
pub fn member_streams(seed: u64, domain: u64, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|i| stream(seed, domain, i, 0)).collect()
}
