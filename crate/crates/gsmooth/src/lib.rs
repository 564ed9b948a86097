//! Gaussian-smoothed stochastic optimization at desk scale.
//!
//! The crate provides:
//! - a minimal dense-tensor reverse-mode autodiff core ([`tensor`]),
//! - closed-form Gaussian smoothing of scalar functions plus a Monte-Carlo
//!   smoothing oracle and inequality checkers ([`smoothing`]),
//! - SGD / SVRG / Adam and their smoothed counterparts driven by sigma
//!   schedules ([`optim`]),
//! - smoothed feedforward/convolutional network objectives with their
//!   closed-form regularizers ([`layers`]),
//! - IDX-format image datasets with pixel/label noise injectors ([`data`]).

pub mod data;
pub mod error;
pub mod fdcheck;
pub mod layers;
pub mod optim;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};

/// Stable seed derivation for independent RNG streams (splitmix64 over the
/// combined words). Deterministic across platforms and releases.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
