//! Reproducible random streams.
//!
//! Every consumer derives its own ChaCha8 stream from the root seed plus a
//! label and up to two indices (e.g. `("mask", epoch, sample)`), so streams
//! never depend on how many numbers another consumer drew. The derivation is
//! `splitmix64` folded over `[root, fnv1a64(label), a, b]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the stream named `label` at position `(a, b)` under `root`.
pub fn derive(root: u64, label: &str, a: u64, b: u64) -> u64 {
    [fnv1a64(label), a, b]
        .into_iter()
        .fold(splitmix64(root), |acc, x| splitmix64(acc ^ x))
}

pub fn stream(root: u64, label: &str, a: u64, b: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(root, label, a, b))
}

/// Standard normal draw (Box-Muller).
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
