//! Deterministic seed derivation.
//!
//! Every stochastic step in the simulator draws from a ChaCha generator whose
//! seed is derived here, so the full experiment is a pure function of the
//! master seed.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine two seeds into one.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    mix(mix(a).wrapping_add(b))
}

/// Seed for one client's local training in one round.
pub fn client_round_seed(master: u64, round: usize, client: usize) -> u64 {
    mix_seed(mix_seed(master, round as u64), client as u64)
}

/// Named sub-streams hanging off the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    ModelInit,
    IdTrain,
    IdTest,
    OodPool,
    OodTest,
    Partition,
    MaliciousSet,
    Poison,
    Participation,
    FlameNoise,
    Clustering,
}

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    mix_seed(master, stream as u64 + 0x5300)
}
