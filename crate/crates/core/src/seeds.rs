//! Root-seed splitting. Every subsystem draws from its own stream so that
//! changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Data,
    Init,
    Dropout,
    Shuffle,
    Bench,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `root` along a path of tags.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(root), |acc, t| mix(acc ^ mix(*t)))
}

pub fn stream_seed(root: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut full = vec![stream as u64 + 1];
    full.extend_from_slice(path);
    derive(root, &full)
}

pub fn rng(root: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, stream, path))
}
