//! Deterministic stream splitting.
//!
//! Every randomized stage draws from its own ChaCha8 stream derived from
//! `(master seed, stage id, index)`. A stage can consume any number of
//! draws without shifting the streams of other stages, so outputs stay
//! stable when unrelated stages change. The derivation is two rounds of
//! the splitmix64 finalizer:
//!
//! ```text
//! seed = mix(mix(master + GOLDEN * stage) + GOLDEN * index)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STAGE_MATCH: u64 = 1;
pub const STAGE_POINTS: u64 = 2;
pub const STAGE_SEGMIX: u64 = 3;
pub const STAGE_WORLD: u64 = 4;
pub const STAGE_MODEL_INIT: u64 = 5;
pub const STAGE_SIM_STEP: u64 = 6;
pub const STAGE_CLI_POINTS: u64 = 7;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `(stage, index)` substream of `master`.
pub fn derive_seed(master: u64, stage: u64, index: u64) -> u64 {
    mix(mix(master.wrapping_add(GOLDEN.wrapping_mul(stage))).wrapping_add(GOLDEN.wrapping_mul(index)))
}

/// ChaCha8 stream for `(stage, index)` under `master`.
pub fn stream(master: u64, stage: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stage, index))
}
