//! Seeding. Every run draws from a ChaCha8 stream so traces replay bit for
//! bit across platforms.
//!
//! Replica `i` of a sweep with master seed `s` uses seed
//! `mix64(s ^ mix64(i + 1))`, where `mix64` is the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replica_seed(master: u64, replica: u64) -> u64 {
    mix64(master ^ mix64(replica.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn replica_rng(master: u64, replica: u64) -> SimRng {
    rng_from_seed(replica_seed(master, replica))
}
