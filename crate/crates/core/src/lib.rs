//! Strictly causal streaming speech-act perception over full-duplex
//! dialogue, with windowed evidence selection and grounded rationales.

pub mod config;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod numeric;
pub mod perceiver;
pub mod rationale;
pub mod rng;
pub mod selector;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
