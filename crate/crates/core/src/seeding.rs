//! Seed derivation. Every random stream in a run is derived from the run seed,
//! a domain tag and an index, so streams never overlap and arms that share a
//! seed see the same goal sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    TrainEpisode = 1,
    PolicyInit = 2,
    ActionSampling = 3,
    Minibatch = 4,
    EvalEpisode = 5,
    EvalSampling = 6,
    Probe = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(domain: Domain, seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(domain as u64) ^ seed) ^ index)
}

pub fn rng_for(domain: Domain, seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(domain, seed, index))
}
