//! Named random substreams derived from one global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream names used throughout the pipelines.
pub mod streams {
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const BATCH: &str = "batch";
    pub const SEARCH: &str = "search";
    pub const NOISE: &str = "noise";
    pub const SIM: &str = "sim";
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
