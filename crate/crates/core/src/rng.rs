//! Seed derivation for reproducible, order-independent Monte Carlo.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams drawn from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Path = 1,
    Noise = 2,
    Reference = 3,
    Pilot = 4,
    Instances = 5,
}

/// Seed for replication `rep` of an experiment with master seed `seed`.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    seed ^ rep
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
