//! Exact shared-prefix attention for batched decoding, on the CPU.
//!
//! Attention over a batch whose sequences share a common prefix decomposes
//! into attention over the shared prefix and attention over each sequence's
//! unique suffix, recombined exactly through log-sum-exp rescaling. The
//! prefix sub-computation can then batch queries across sequences, turning
//! many matrix-vector products into one matrix-matrix product and reading
//! the shared keys and values once instead of once per sequence.
//!
//! The crate provides the attention kernels and their recombination
//! ([`attention`]), the prefix-sharing tree and suffix caches ([`sharing`]),
//! the batched engines ([`engine`]), a toy decoder-only transformer that
//! makes end-to-end decoding measurable ([`model`]), a benchmark harness
//! ([`bench`]), and runtime verification suites ([`verify`]).

pub mod attention;
pub mod bench;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod sharing;
pub mod verify;

pub use error::{Error, Result, TreeError};
pub use numerics::Scalar;
