//! Chunk-synchronous streaming transformer transducer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode autodiff graph.
//! - [`chunking`]: chunk geometry, left-context masks and the streaming buffer.
//! - [`lattice`]: forward-backward loss over the chunk × label lattice.
//! - [`model`]: the encoder/decoder network.
//! - [`decoding`]: greedy, beam and streaming decoding plus error rates.
//! - [`train`]: synthetic data, optimiser, training loop and checkpoints.
//! - [`diagnostics`]: finite-difference and enumeration checks.

pub mod chunking;
pub mod decoding;
pub mod diagnostics;
pub mod error;
pub mod lattice;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
