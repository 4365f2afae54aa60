//! Counter-based random streams. Every consumer derives its own generator from
//! the run seed plus a tuple of tags, so the order in which work is scheduled
//! never changes the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into the derivation so different consumers of the
/// same `(seed, epoch, index)` never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Negatives = 3,
    Actions = 4,
    Dropout = 5,
    Baseline = 6,
    Evaluation = 7,
    Synthetic = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, tags: &[u64]) -> StreamRng {
    let mut h = splitmix(seed ^ (purpose as u64).rotate_left(56));
    for &t in tags {
        h = splitmix(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}
