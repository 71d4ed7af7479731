//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by the
//! experiment seed and a stable hash of a label (site id, purpose, round).
//! Streams therefore never depend on the order in which sites are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn labels into stream ids.
pub fn stable_hash(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(label));
    rng
}

/// Stream for `label` at position `index` (round number, tensor index, ...).
pub fn substream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stable_hash(label));
    rng
}
