//! Counter-based seeding.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(master seed, replicate index, stream id)`, so replicates are independent
//! of each other and of the order in which they are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Stream identifiers. Distinct purposes never share a stream.
pub mod stream {
    pub const SIGNAL: u64 = 1;
    pub const OBSERVATION: u64 = 2;
    pub const GRADIENT: u64 = 3;
    pub const EVALUATION: u64 = 4;
    pub const SCHEDULE: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed, a replicate index and a stream id.
pub fn sub_seed(master: u64, replicate: u64, stream: u64) -> u64 {
    let a = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    let b = splitmix64(a ^ replicate.wrapping_mul(0x2545_f491_4f6c_dd1d));
    splitmix64(b ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
