//! Seeded random streams. Every consumer that needs independent randomness
//! (an episode, a training stage, an evaluation worker) gets its own stream
//! derived from `(seed, stream id)`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

pub fn stream(seed: u64, id: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream ids are namespaced so two subsystems drawing from the same seed
/// never share a stream.
pub fn substream(seed: u64, namespace: u32, index: u32) -> RngStream {
    stream(seed, ((namespace as u64) << 32) | index as u64)
}

pub mod ns {
    pub const SCRIPTED_EPISODE: u32 = 1;
    pub const RANDOM_EPISODE: u32 = 2;
    pub const NET_INIT: u32 = 3;
    pub const FEASIBLE_TRAIN: u32 = 4;
    pub const REWARD_TRAIN: u32 = 5;
    pub const COST_TRAIN: u32 = 6;
    pub const POLICY_TRAIN: u32 = 7;
    pub const EVAL_START: u32 = 8;
    pub const EVAL_EPISODE: u32 = 9;
}
