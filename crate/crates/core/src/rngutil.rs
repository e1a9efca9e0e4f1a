//! Seed derivation and sampling helpers. Every random draw in the crate
//! flows from one master seed through these functions, which keeps runs
//! reproducible across platforms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a master seed and a role path into an independent stream seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut x = splitmix64(master);
    for &p in parts {
        x = splitmix64(x ^ splitmix64(p));
    }
    x
}

/// Standard normal draw via Box-Muller; one value per call.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
