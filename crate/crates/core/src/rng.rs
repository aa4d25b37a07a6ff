//! Counter-based random streams.
//!
//! Every random quantity in a run is drawn from a generator keyed by
//! `(seed, stream, a, b)`, typically `a = round` and `b = device`. Policies
//! therefore cannot shift the environment's variance stream by consuming
//! randomness of their own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Interference = 1,
    Network = 2,
    Selection = 3,
    Training = 4,
    Baseline = 5,
    Cluster = 6,
    Partition = 7,
    Dataset = 8,
    ModelInit = 9,
    QInit = 10,
    Fleet = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single well-mixed word.
pub fn mix(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

/// A generator that depends only on its key.
pub fn keyed_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = mix(seed, stream, a, b);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform value in `[0, 1)` derived from a hash word.
pub fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 / (1u64 << 53) as f64
}
