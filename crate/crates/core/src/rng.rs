//! Deterministic randomness.
//!
//! Every consumer draws from its own ChaCha8 stream, keyed by a purpose tag
//! and an index, so adding or removing one consumer never shifts the draws
//! seen by another. Distribution sampling (open uniform, normal, gamma,
//! beta) is implemented here rather than pulled from rand_distr so the
//! exact draw sequences are pinned by this crate alone.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scene geometry and colors during training data generation.
pub const STREAM_SCENE: u64 = 1;
/// Per-iteration training batch contents.
pub const STREAM_DATA: u64 = 2;
/// Held-out evaluation scenes.
pub const STREAM_EVAL_DATA: u64 = 3;
/// Minibatch pairing shuffle.
pub const STREAM_PAIR: u64 = 4;
/// Mixing ratio draws.
pub const STREAM_LAMBDA: u64 = 5;
/// Region-mixer rectangle placement.
pub const STREAM_REGION: u64 = 6;
/// Model parameter init.
pub const STREAM_INIT: u64 = 7;
/// Source/target pairing for cross-domain mixing in warm-up.
pub const STREAM_NST_PAIR: u64 = 8;
/// Mixing ratios for cross-domain warm-up mixing.
pub const STREAM_NST_LAMBDA: u64 = 9;
/// Target/target pairing during adaptation.
pub const STREAM_TGT_PAIR: u64 = 10;
/// Mixing ratios for target/target mixing.
pub const STREAM_TGT_LAMBDA: u64 = 11;
/// Source/pseudo-target pairing during adaptation.
pub const STREAM_MST_PAIR: u64 = 12;
/// Mixing ratios for source/pseudo-target mixing.
pub const STREAM_MST_LAMBDA: u64 = 13;
/// Strong augmentation noise on the student view.
pub const STREAM_STRONG: u64 = 14;
/// Finite-difference coordinate sampling.
pub const STREAM_GRADCHECK: u64 = 15;

/// ChaCha stream for (seed, purpose tag, index). Distinct (tag, index)
/// pairs give independent streams under the same seed.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    assert!(tag < 1 << 16, "tag must fit in 16 bits");
    assert!(index < 1 << 48, "index must fit in 48 bits");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | index);
    rng
}

/// splitmix64 finalizer; bijective on u64.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the k-th child seed. For a fixed parent the map `k -> child`
/// is injective, so children never collide.
pub fn child_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(k.wrapping_add(1))))
}

/// Uniform draw from the open interval (0, 1).
pub fn uniform_open01(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.gen();
        if v > 0.0 && v < 1.0 {
            return v;
        }
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = uniform_open01(rng);
    let u2 = uniform_open01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gamma(alpha, 1) via Marsaglia-Tsang squeeze; alpha < 1 is boosted
/// through Gamma(alpha + 1) * U^(1/alpha).
pub fn gamma(rng: &mut ChaCha8Rng, alpha: f64) -> f64 {
    assert!(alpha > 0.0, "gamma needs alpha > 0");
    if alpha < 1.0 {
        let boost = uniform_open01(rng).powf(1.0 / alpha);
        return gamma(rng, alpha + 1.0) * boost;
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = uniform_open01(rng);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Beta(alpha, alpha) as a ratio of two gamma draws.
pub fn beta_symmetric(rng: &mut ChaCha8Rng, alpha: f64) -> f64 {
    let a = gamma(rng, alpha);
    let b = gamma(rng, alpha);
    a / (a + b)
}
