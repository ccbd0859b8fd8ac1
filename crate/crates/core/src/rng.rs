//! Seed splitting.
//!
//! All randomness derives from one 64-bit run seed. A consumer asks for a
//! generator by `(seed, stream_id)`: the seed keys a ChaCha8 generator and the
//! stream id selects one of its 2^64 independent streams. Modules use
//! distinct stream ids (see [`streams`]) so they never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids handed out to the crate's random consumers.
pub mod streams {
    pub const PERTURBATION: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const DOWNSAMPLE: u64 = 3;
    pub const WEIGHTS: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    pub const POINT_STUB: u64 = 6;
    pub const IMAGE_STUB: u64 = 7;
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derives a child seed, e.g. one per sample of a synthetic suite.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
