//! Seeded RNG streams.
//!
//! Every stochastic component draws from its own [`Pcg64`] stream derived
//! from the master seed, so a single `seed` value in the config reproduces
//! the whole run and streams stay independent of each other.

use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

/// Named stream offsets. Streams are decoupled so that, e.g., adding one
/// more data-order draw does not shift the augmentation noise sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Transform = 3,
    StyleMix = 4,
    Perturbation = 5,
    Mixup = 6,
    Eval = 7,
}

/// Derive a stream RNG from the master seed.
pub fn stream_rng(seed: u64, stream: Stream) -> Pcg64 {
    // splitmix64 scramble of (seed, stream) into a 128-bit PCG seed state
    let a = splitmix64(seed ^ (stream as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let b = splitmix64(a);
    Pcg64::new(
        ((a as u128) << 64) | b as u128,
        0xa02bdbf7bb3c0a7ac28fa16a64abf96 | 1,
    )
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Serializable bundle of the trainer's RNG streams, stored in checkpoints
/// so a resumed run continues the exact same sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngBundle {
    pub data_order: Pcg64,
    pub transform: Pcg64,
    pub style_mix: Pcg64,
    pub perturbation: Pcg64,
    pub mixup: Pcg64,
}

impl RngBundle {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            data_order: stream_rng(seed, Stream::DataOrder),
            transform: stream_rng(seed, Stream::Transform),
            style_mix: stream_rng(seed, Stream::StyleMix),
            perturbation: stream_rng(seed, Stream::Perturbation),
            mixup: stream_rng(seed, Stream::Mixup),
        }
    }
}
