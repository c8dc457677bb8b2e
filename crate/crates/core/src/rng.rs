//! Seeded RNG streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by
//! `(seed, stream)` so that independent concerns (weight init, batch
//! shuffling, reparametrization noise, dataset sampling) never share a
//! sequence and runs stay bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids used by the training pipeline.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const WEIGHT_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const REPARAM: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const BASELINE: u64 = 6;
}

pub fn seeded_rng(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Standard normal draw via Box-Muller on open-interval uniforms.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn fill_standard_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}
