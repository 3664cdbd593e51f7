//! Named, seed-derived random streams.
//!
//! Every consumer of randomness in a simulation run (instance generation,
//! reward noise, policy noise) owns its own ChaCha stream. ChaCha is counter
//! based: the key comes from the run seed and the 64-bit stream id from the
//! stream name, so adding a new consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The generator type handed to every sampler in this crate.
pub type StreamRng = ChaCha12Rng;

/// Stream used for theta* and the context sequence.
pub const INSTANCE_STREAM: &str = "instance";
/// Stream used for the reward noise of the environment.
pub const REWARD_STREAM: &str = "reward-noise";
/// Stream used by a policy for its own exploration noise.
pub const POLICY_STREAM: &str = "policy-noise";

/// Seed of run `run_id` in an experiment with `base_seed`.
pub fn run_seed(base_seed: u64, run_id: u64) -> u64 {
    base_seed.wrapping_add(run_id)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream `name` of the generator keyed by `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Stream `name` of run `run_id` under `base_seed`.
pub fn run_stream(base_seed: u64, run_id: u64, name: &str) -> StreamRng {
    stream(run_seed(base_seed, run_id), name)
}
