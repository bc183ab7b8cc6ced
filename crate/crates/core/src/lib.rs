//! Bilinear recurrent sequence-mixing kernels with a scalar-plus-low-rank
//! state transition, plus the baselines it generalizes (linear attention,
//! gated linear attention, delta rule, gated delta rule).
//!
//! The library provides two numerically-equivalent execution paths over the
//! same per-token signals:
//!
//! * [`recurrence`] — the per-token oracle: explicit state updates
//!   `S' = S (alpha I - gamma k k^T) + beta v k^T`, one token at a time.
//! * [`chunkwise`] — a chunk-parallel reformulation using a compact WY-style
//!   representation of products of rank-1-corrected transitions, exact up to
//!   floating-point rounding.
//!
//! Everything is generic over element precision ([`real::Real`]: `f32` or
//! `f64`), deterministic for a fixed seed and thread count, and exercised by
//! independent oracles in the test suites. [`autodiff`] implements reverse-mode
//! gradients (full BPTT and chunk-checkpointed BPTT) for every variant,
//! [`model`] stacks the kernels into a small causal language model, [`tasks`]
//! provides a synthetic key-value recall benchmark and a training harness,
//! [`bench`] measures throughput, and [`verify`] bundles the invariant suites
//! exposed by the CLI.

pub mod autodiff;
pub mod bench;
pub mod chunkwise;
pub mod error;
pub mod gates;
pub mod model;
pub mod numerics;
pub mod real;
pub mod recurrence;
pub mod tasks;
pub mod verify;

pub use error::{KernelError, Result};
pub use real::Real;
