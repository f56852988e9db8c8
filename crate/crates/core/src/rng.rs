//! Named, order-independent random streams.
//!
//! Every consumer derives its own generator from the run seed plus a stream
//! tag and coordinates (round, client, ...). Results therefore do not depend
//! on how clients are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    ClientSampling = 3,
    LocalTraining = 4,
    ChildSampling = 5,
    Augment = 6,
    Personalize = 7,
    Pareto = 8,
    Synthetic = 9,
    TierSpec = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x51_7CC1_B727_220A)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, coords))
}
