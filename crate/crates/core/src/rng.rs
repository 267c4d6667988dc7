//! Seeded, splittable randomness.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! (seed, namespace, index), so results do not depend on iteration order and
//! are bit-reproducible across runs on one platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NS_DATASET: u64 = 1;
pub const NS_TEST_SET: u64 = 2;
pub const NS_TRAIN: u64 = 3;
pub const NS_EVAL: u64 = 4;
pub const NS_PARAM_INIT: u64 = 5;
pub const NS_SIGNED_PERM: u64 = 6;

const INDEX_BITS: u64 = 56;

pub fn stream_rng(seed: u64, namespace: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << INDEX_BITS));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((namespace << INDEX_BITS) | index);
    rng
}

/// Index for per-(epoch, sample) training streams.
pub fn epoch_sample_index(epoch: usize, sample: usize) -> u64 {
    ((epoch as u64) << 32) | sample as u64
}
