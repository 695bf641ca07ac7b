use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one 64-bit seed.
///
/// Every consumer of randomness takes its own stream so that, for example,
/// the mini-batch shuffle order does not depend on how many draws a selector
/// made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Blobs = 1,
    Imbalance = 2,
    Split = 3,
    ModelInit = 4,
    Shuffle = 5,
    Selection = 6,
    Batches = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mixes an epoch (or round) number into a seed; splitmix64 finalizer.
pub fn mix_seed(seed: u64, round: u64) -> u64 {
    let mut z = seed ^ round.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
