//! Seed derivation. Every random stream in a run descends from one root seed.
//!
//! `derive(parent, label)` mixes the parent seed with an FNV-1a hash of the
//! label through SplitMix64, so component streams ("data", "split", "train")
//! are decorrelated yet fully determined by the root. Fold seeds follow the
//! simpler `train_seed ^ fold_index` rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a(label))
}

pub fn derive_index(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

pub fn fold_seed(train_seed: u64, fold: usize) -> u64 {
    train_seed ^ fold as u64
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
