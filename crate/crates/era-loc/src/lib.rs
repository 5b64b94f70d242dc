//! End-to-end simulator and learning framework for user localization with
//! pattern-reconfigurable antenna arrays: wideband OFDM observations through
//! spherical-harmonic-programmable radiation patterns, a two-timescale active
//! sensing protocol, and a trainable attention+LSTM policy.

pub mod array;
pub mod autodiff;
pub mod channel;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod harmonics;
pub mod policy;
pub mod training;

pub use error::{Error, Result};

/// Derives an independent RNG substream from a global seed and an index.
pub fn substream(global_seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // splitmix64 over the pair keeps substreams decorrelated.
    let mut z = global_seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    rand_chacha::ChaCha8Rng::seed_from_u64(z)
}
