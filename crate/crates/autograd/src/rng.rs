//! Seeded random streams.
//!
//! Every consumer of randomness (initialization, shuffling, dropout, gate
//! noise) gets its own ChaCha stream derived from `(seed, label)`, so adding a
//! consumer never perturbs the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_id(label));
    rng
}

/// Child stream of a parent seed, indexed by an integer (e.g. a domain index).
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(seed ^ label_id(label).rotate_left(17) ^ splitmix(index))
}

fn label_id(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut impl Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// Normal sample with standard deviation `std`, redrawn until it falls within
/// two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, std: f32) -> f32 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
