//! Seeded randomness helpers.
//!
//! All randomness in the crate flows through a ChaCha20 stream created from
//! an explicit `u64` seed, so every run is reproducible byte-for-byte.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::num::Real;

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller on the f64 stream, then narrowed to
/// the target scalar. Keeping the draw in f64 means f32 and f64 runs consume
/// the generator identically.
pub fn standard_normal<R: Real>(rng: &mut ChaCha20Rng) -> R {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    R::of((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

pub fn normal_vec<R: Real>(rng: &mut ChaCha20Rng, n: usize) -> Vec<R> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn uniform<R: Real>(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> R {
    R::of(lo + (hi - lo) * rng.gen::<f64>())
}

/// First `k` entries of a partial Fisher-Yates shuffle: a uniform sample
/// without replacement, deterministic given the generator state.
pub fn sample_without_replacement(rng: &mut ChaCha20Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut items = pool.to_vec();
    let k = k.min(items.len());
    for i in 0..k {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(k);
    items
}
