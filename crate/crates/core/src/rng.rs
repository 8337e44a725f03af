//! Deterministic random streams.
//!
//! Every consumer of randomness receives a ChaCha stream keyed by a master
//! seed and a stream id, so replicate `r` can be regenerated in isolation and
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream id reserved for the true-ATE Monte-Carlo draw of a model.
pub const TRUE_ATE_STREAM: u64 = u64::MAX;
/// Stream id reserved for HAL cross-validation fold assignment.
pub const HAL_CV_STREAM: u64 = u64::MAX - 1;
/// Stream id reserved for synthetic scenario construction.
pub const SCENARIO_STREAM: u64 = u64::MAX - 2;

/// Counter-based split of `master_seed`: the key is the seed, the ChaCha
/// stream word is `stream`.
pub fn stream(master_seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed from a parent stream.
pub fn child_seed(rng: &mut Stream) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
