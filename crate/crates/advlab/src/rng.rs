//! Seed plumbing. Every random decision in the crate flows through a
//! `ChaCha8Rng` created from an explicit 64-bit seed, and composite pipelines
//! derive per-stage seeds with `derive_seed` so that stages stay decoupled
//! (reordering one never perturbs another) while the whole run remains a pure
//! function of the root seed.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over (seed, salt): cheap, well-mixed, stable.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) with full 53-bit resolution.
pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal via Box-Muller (two uniforms per draw, no cached spare,
/// so consumption per call is fixed and deterministic).
pub fn gaussian(rng: &mut impl RngCore) -> f64 {
    loop {
        let u1 = 1.0 - uniform01(rng); // (0, 1]
        let u2 = uniform01(rng);
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
