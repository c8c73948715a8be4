//! Reproducible random streams.
//!
//! Every path or realization draws from its own ChaCha8 stream selected by
//! `(seed, domain, index)`. The key is derived from `seed` and `domain`, and
//! `index` is the 64-bit ChaCha stream id, so streams never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

pub mod domain {
    pub const SLBM: u64 = 1;
    pub const FLOW: u64 = 2;
    pub const SCALAR_R: u64 = 3;
    pub const SCALAR_Q: u64 = 4;
    pub const COUPLED: u64 = 5;
    pub const FIELD: u64 = 6;
    pub const LADDER: u64 = 7;
    pub const QV: u64 = 8;
    pub const PARTICLE_FIELD: u64 = 9;
    pub const PARTICLE_PATH: u64 = 10;
    pub const ANISO: u64 = 11;
    pub const LYAPUNOV: u64 = 12;
    pub const SCALAR_S: u64 = 13;
    pub const HARNESS: u64 = 14;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> Stream {
    let a = splitmix(seed);
    let b = splitmix(a ^ domain.wrapping_mul(0xd6e8_feb8_6659_fd93));
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&splitmix(b).to_le_bytes());
    key[24..].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[inline]
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
