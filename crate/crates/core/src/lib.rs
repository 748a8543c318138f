//! Layered Poisson cluster models for event streams.
//!
//! An observed event stream is explained by a stack of latent Poisson
//! processes: the top layer is homogeneous, and each event in layer l+1
//! spawns a gamma-kernel cluster of events in layer l. Layer 0 is the
//! observed data. Inference runs Markov chain Monte Carlo over the latent
//! layers (augmented with "virtual" candidate events so that moves stay
//! reversible) inside a Monte Carlo EM loop that fits kernel parameters
//! and per-sequence base rates.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature enables the standard library, and `parallel` adds multi-core
//! E-steps via rayon. All randomness flows through [`rng::RngStream`] seeds,
//! so every computation is reproducible.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod mcem;
pub mod mcmc;
pub mod model;
pub mod oracle;
pub mod predict;
pub mod rng;
pub mod simulate;
pub mod special;

pub use model::{Architecture, EventSequence, KernelParams, LatentState, NodeId, SequenceParams};
pub use rng::RngStream;
