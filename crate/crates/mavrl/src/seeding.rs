//! Deterministic seed derivation.
//!
//! Every stochastic stage (episode sampling, per-view augmentation draws,
//! attack initialisation, evaluation tasks) derives its own ChaCha stream
//! from the run seed and a stage path, so stages are independent and the
//! whole pipeline is a pure function of the run seed regardless of worker
//! scheduling.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finaliser; decorrelates structured inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of stage tags.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut s = mix(base);
    for &tag in path {
        s = mix(s ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stage tags used across the pipeline. Fixed constants so seeds are stable
/// across refactors.
pub mod stage {
    pub const EPISODE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const FIXTURE: u64 = 6;
    pub const DIAG: u64 = 7;
}
