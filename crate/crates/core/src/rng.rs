//! Named random streams.
//!
//! Every random draw in a scenario comes from a stream keyed by
//! `(master_seed, purpose tag, actor)`. Streams never share state, so the
//! values one actor sees do not depend on how many draws any other actor
//! made or in which order events were processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn stream_key(master_seed: u64, tag: &str, actor: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"poflsc/stream/v1");
    hasher.update(master_seed.to_be_bytes());
    hasher.update((tag.len() as u32).to_be_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(actor.to_be_bytes());
    hasher.finalize().into()
}

/// Independent generator for `(tag, actor)` under `master_seed`.
pub fn stream(master_seed: u64, tag: &str, actor: u64) -> StreamRng {
    ChaCha8Rng::from_seed(stream_key(master_seed, tag, actor))
}

/// A 64-bit seed for `(tag, actor)`, suitable for recording in an audit trail.
pub fn derive_seed(master_seed: u64, tag: &str, actor: u64) -> u64 {
    let key = stream_key(master_seed, tag, actor);
    u64::from_be_bytes([
        key[0], key[1], key[2], key[3], key[4], key[5], key[6], key[7],
    ])
}

/// Generator for a previously derived 64-bit seed.
pub fn from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw (Box-Muller, first branch only).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps ln finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    mean + std * standard_normal(rng)
}
