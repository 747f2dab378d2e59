//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] (the 8-round
//! ChaCha stream cipher used as a counter-based generator), so runs are
//! reproducible across platforms.
//!
//! Subsystems never share a stream. A child seed is derived from the master
//! seed and a subsystem label with SplitMix64:
//!
//! ```text
//! child = splitmix64(master ^ splitmix64(fnv1a64(label)))
//! ```
//!
//! so adding draws to one subsystem cannot perturb another.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

/// Labels for the standard subsystem streams.
pub mod stream {
    pub const INIT: &str = "init";
    pub const DROPOUT: &str = "dropout";
    pub const SAMPLER: &str = "sampler";
    pub const DATA: &str = "data";
    pub const BENCH: &str = "bench";
    pub const KMEANS: &str = "kmeans";
    pub const IGI: &str = "igi";
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn child_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a64(label.as_bytes())))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child(master: u64, label: &str) -> Rng {
    seeded(child_seed(master, label))
}
