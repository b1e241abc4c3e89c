//! Seed derivation and deterministic random streams.
//!
//! Every stochastic path in the crate draws from a ChaCha8 stream whose seed
//! is derived with [`mix`], so per-row and per-trial streams are independent
//! of scheduling and can be generated in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with a sub-stream key.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ b)
}

/// FNV-1a 64-bit over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fill `out` with i.i.d. N(0, std²) draws.
pub fn fill_normal(rng: &mut Stream, std: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = z * std;
    }
}

pub fn normal_vec(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed);
    let mut v = vec![0.0; len];
    fill_normal(&mut rng, 1.0, &mut v);
    v
}
