//! Keyed random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream derived from
//! `(master_seed, scenario, purpose, index)`, so results do not depend on the
//! order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sim::Scenario;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialState = 1,
    PriorNoise = 2,
    Behavior = 3,
    Threshold = 4,
    Diffusion = 5,
    Training = 6,
    NetInit = 7,
    Proposal = 8,
    Shuffle = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit key mixing `(master, scenario, purpose, index)`.
pub fn stream_seed(master: u64, scenario: Scenario, purpose: Purpose, index: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ (scenario.index() as u64 + 1));
    h = splitmix64(h ^ purpose as u64);
    splitmix64(h ^ index)
}

pub fn stream(master: u64, scenario: Scenario, purpose: Purpose, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, scenario, purpose, index))
}

/// Stream keyed by two indices, e.g. (stage, sample).
pub fn stream2(master: u64, scenario: Scenario, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let inner = stream_seed(master, scenario, purpose, a);
    ChaCha8Rng::seed_from_u64(splitmix64(inner ^ splitmix64(b.wrapping_add(0xA5A5))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn keys_separate_streams() {
        let a = stream_seed(7, Scenario::South, Purpose::PriorNoise, 0);
        assert_ne!(a, stream_seed(7, Scenario::South, Purpose::PriorNoise, 1));
        assert_ne!(a, stream_seed(7, Scenario::North, Purpose::PriorNoise, 0));
        assert_ne!(a, stream_seed(7, Scenario::South, Purpose::Behavior, 0));
        assert_ne!(a, stream_seed(8, Scenario::South, Purpose::PriorNoise, 0));
        let x: u64 = stream(7, Scenario::South, Purpose::PriorNoise, 0).random();
        let y: u64 = stream(7, Scenario::South, Purpose::PriorNoise, 0).random();
        assert_eq!(x, y);
    }
}
