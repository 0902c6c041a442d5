//! Seed derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream keyed by a
//! seed derived from a base seed and a tuple of small integers (role,
//! constituent, chunk, slice). Deriving by position rather than by call
//! order is what makes a replay from any checkpoint reproduce the original
//! computation bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`, order-sensitively.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Domain tags so that teacher and student streams never collide.
pub mod tag {
    pub const TEACHER_INIT: u64 = 0x7465_6163_6869_6e69;
    pub const TEACHER_ROUND: u64 = 0x7465_6163_726f_756e;
    pub const STUDENT_INIT: u64 = 0x7374_7564_6969_6e69;
    pub const STUDENT_ROUND: u64 = 0x7374_7564_726f_756e;
}
