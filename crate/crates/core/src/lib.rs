//! Early-bird lottery tickets for small transformers.
//!
//! The crate trains a tiny transformer, computes a magnitude pruning mask at
//! the end of every epoch, and declares an early-bird ticket once the
//! normalized Hamming distance between consecutive masks falls below a
//! threshold. The ticket is then retrained from the starting weights and
//! compared against an unpruned baseline, with memory accounting for the
//! pruned weights.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, finite-difference
//!   gradient checks, the tensor archive format
//! - [`model`]: an encoder (patch inputs) and a causal (token inputs) classifier
//! - [`pruning`]: magnitude masks, mask application and mask distance
//! - [`earlybird`]: the detector state machine and distance heatmaps
//! - [`trainer`]: optimizers, training loops, memory accounting and the pipeline
//! - [`data`]: synthetic datasets, the CIFAR-10 binary reader and batching
//! - [`config`]: TOML experiment configs and `key=value` overrides
//! - [`cli`]: run directories, sweeps and the command implementations

pub mod cli;
pub mod config;
pub mod data;
pub mod earlybird;
pub mod error;
pub mod io;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
