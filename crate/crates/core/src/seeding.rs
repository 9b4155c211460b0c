//! Seed derivation and seeded subsampling shared by the probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type ProbeRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ProbeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit seed from a base seed and a list of string parts.
///
/// Parts are length-prefixed so `("ab", "c")` and `("a", "bc")` differ.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, &["fold", &fold.to_string()])
}

/// Sorted indices of a `fraction` subsample of `0..n`, without replacement.
pub fn subsample(n: usize, fraction: f64, rng: &mut ProbeRng) -> Vec<usize> {
    let take = ((n as f64) * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(take.min(n));
    idx.sort_unstable();
    idx
}

/// Contiguous-block fold index for position `pos` among `len` shuffled items.
pub fn block_fold(pos: usize, len: usize, n_folds: usize) -> usize {
    pos * n_folds / len
}
