//! Counter-based random streams.
//!
//! Every random draw in a simulation comes from a stream keyed by
//! `(master seed, iteration, agent)`, so the samples an agent sees never
//! depend on evaluation order or on how many worker threads exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream for one agent at one iteration.
pub fn agent_stream(master_seed: u64, iteration: u64, agent: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(agent);
    rng
}

/// Stream used when building problem instances from a seed.
pub fn instance_stream(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(b"instance");
    ChaCha8Rng::from_seed(key)
}

/// Master seed of replicate `index`; replicate 0 keeps `master_seed`.
///
/// Later replicates are spread with a SplitMix64 finalizer so that
/// `(seed, r)` and `(seed + 1, r - 1)` do not share streams.
pub fn replicate_seed(master_seed: u64, index: u64) -> u64 {
    if index == 0 {
        return master_seed;
    }
    let mut z = master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
