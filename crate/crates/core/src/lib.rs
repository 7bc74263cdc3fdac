//! Trace-driven simulator of semi-supervised split learning over a LEO
//! satellite constellation.
//!
//! Satellites hold the front of a split network plus a small auxiliary head,
//! train it on their own partially labelled data between ground-station
//! contacts (mean-teacher pseudo-labelling with per-class adaptive
//! thresholds, plus an InfoNCE term on low-confidence samples), and push
//! cut-layer activations down during the short contact windows. The ground
//! station grows that sparse activation set by distribution-steered
//! interpolation, trains the back of the network on it, and averages the
//! client halves.
//!
//! Module map:
//!
//! - [`nn`]: dense tensors, MLP sub-models, manual backprop, SGD, softmax CE.
//! - [`ssl`]: augmentation, EMA teacher, client losses, adaptive thresholds.
//! - [`orbit`]: orbital period, overhead-pass contact geometry, rate traces.
//! - [`link`]: window byte budgets and activation upload selection.
//! - [`interp`]: server-side activation interpolation.
//! - [`protocol`]: the round state machine and evaluation.
//! - [`config`], [`data`], [`metrics`]: the experiment front door used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
mod error;
pub mod interp;
pub mod link;
pub mod metrics;
pub mod nn;
pub mod orbit;
pub mod protocol;
pub mod ssl;

pub use error::{Error, Result};

/// Seeded RNG used everywhere in the simulator.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SimRng`] from a seed and a stream label, so independent
/// components never share a random stream.
pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    use rand::SeedableRng;
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
