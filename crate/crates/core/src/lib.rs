//! Parallel token prediction (PTP).
//!
//! An autoregressive model turns a uniform auxiliary variable `u` into a
//! token through an inverse-CDF lookup. PTP moves that lookup inside the
//! model: the auxiliaries for a whole window of future tokens are embedded
//! and fed alongside the context, so a single forward pass can emit several
//! interdependent tokens. A verifier model then replays the same auxiliaries
//! autoregressively and accepts the longest matching prefix plus one
//! corrected token, which makes block decoding exact.
//!
//! The crate is organised as:
//!
//! - [`sampling`] — the deterministic kernel: categorical CDFs, `pick`,
//!   compatible intervals, Beta-warped interval sampling, the float32 bit
//!   codec, and logit shaping.
//! - [`teacher`] — reference autoregressive models (tabular Markov tables
//!   and a trained transformer) with sequential and batched evaluation.
//! - [`model`] — the PTP student: a causal transformer consuming context
//!   tokens plus embedded auxiliaries, in one-hot, categorical, or
//!   independent mode.
//! - [`train`] — teacher pretraining, distillation with selectable losses
//!   and proposal distributions, and inverse autoregressive training.
//! - [`decode`] — error-corrected block generation, acceptance accounting,
//!   best-of-M selection, and restricted-window sweeps.
//! - [`harness`] — synthetic corpora, token files, the two-token
//!   compatibility map, and run/metrics plumbing used by the CLI.

pub mod ckpt;
pub mod decode;
pub mod error;
pub mod harness;
pub mod model;
pub(crate) mod nn;
pub mod runcfg;
pub mod sampling;
pub mod teacher;
pub mod train;

pub use error::{PtpError, Result};
pub use nn::{Adam, ArchConfig};

/// Token identifier. Data tokens live in `0..vocab`; the reserved BOS id
/// used internally by transformer models is not part of this range.
pub type Token = usize;
