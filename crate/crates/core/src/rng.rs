//! Deterministic random substreams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, repetition, purpose, iteration)`, so estimator samples, QuadCV
//! auxiliary batches and evaluation batches never share randomness and a run
//! is reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Estimator = 2,
    Minibatch = 3,
    QuadLocation = 4,
    QuadExpectation = 5,
    Elbo = 6,
    VarianceRatio = 7,
    Lppd = 8,
    Split = 9,
}

/// Identifies the stream an [`EpsBatch`](crate::families::EpsBatch) was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId {
    pub seed: u64,
    pub repetition: u32,
    pub purpose: Purpose,
    pub iteration: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl StreamId {
    pub fn new(seed: u64, repetition: u32, purpose: Purpose, iteration: u64) -> Self {
        StreamId {
            seed,
            repetition,
            purpose,
            iteration,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let key = splitmix(splitmix(self.seed) ^ u64::from(self.repetition));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(((self.purpose as u64) << 56) ^ self.iteration);
        rng
    }
}

pub fn stream(seed: u64, repetition: u32, purpose: Purpose, iteration: u64) -> ChaCha8Rng {
    StreamId::new(seed, repetition, purpose, iteration).rng()
}
