//! # beatkit
//!
//! A sequence-modeling toolkit for musical beat and downbeat tracking:
//! a dilated self-attention Transformer encoder over demixed (per-instrument)
//! spectrogram channels, trained with multi-task supervision, decoded with a
//! bar-pointer dynamic Bayesian network, and analyzed through Markov-chain
//! products of its attention matrices.
//!
//! The crate is organized as a library with one thin `beatkit` binary; the
//! `examples/` directory holds one runnable example per major capability
//! (data generation, training, decoding, benchmarking, attention export,
//! evaluation).
//!
//! Everything is pure Rust, f64 throughout, and deterministic under a fixed
//! seed.

pub mod alloc_meter;
pub mod cli;
pub mod dbn;
pub mod dsa;
pub mod error;
pub mod io;
pub mod markov;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Value};
