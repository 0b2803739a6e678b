//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from the master seed and a path of integer labels
//! (stage, step, trial, ...). A stream depends only on its path, never on
//! the order in which streams are created, so serial and parallel
//! execution see identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stage labels used as the first element of derivation paths.
pub mod stage {
    pub const BONFERRONI: u64 = 0xB0F;
    pub const FRESH_STEP: u64 = 0x57E9;
    pub const DIAGNOSTIC_SPLIT: u64 = 0xD1A6;
    pub const DIAGNOSTIC_BOOT: u64 = 0xD1A7;
    pub const SIM_PARTITION: u64 = 0x5111;
    pub const SIM_MARGINAL: u64 = 0x5112;
    pub const SIM_REFERENCE: u64 = 0x5113;
    pub const SPECTRAL: u64 = 0x5BEC;
    pub const REPLICATE: u64 = 0x4E9;
    pub const STEPDOWN: u64 = 0x5D;
    pub const PIPELINE: u64 = 0x919E;
}

const PATH_SALT: u64 = 0x2545_F491_4F6C_DD1D;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` along `path`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| {
            splitmix64(acc ^ splitmix64(label.wrapping_add(PATH_SALT)))
        })
}

/// Random stream for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// `len` independent standard Gaussian draws.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
