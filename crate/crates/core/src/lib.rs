//! Desk-scale sequence-to-sequence training laboratory.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense tensors and a tape-based reverse-mode autodiff engine,
//!   plus finite-difference gradient checking.
//! * [`divergences`]: cross entropy, KL, alpha-skew divergence, and the dual
//!   skew losses with closed-form gradients with respect to logits.
//! * [`controller`]: nonlinear PI controller producing the mixing weight
//!   `beta(t)` from an observed divergence signal.
//! * [`corpus`]: synthetic parallel corpora (copy / reverse / synonym-noise)
//!   with deterministic generation and TSV round-tripping.
//! * [`seq2seq`]: a GRU encoder-decoder with additive attention, built on the
//!   tape so the autodiff path can cross-check the closed-form loss gradients.
//! * [`eval`]: greedy and beam decoding, BLEU, and a paired sign test.
//! * [`trainer`]: phased schedules (cross-entropy warmup then controlled
//!   dual-skew fine-tuning), Adam/SGD, checkpoints, and a metrics log.
//! * [`gradcheck`]: the bundled gradient-verification suites used by both the
//!   CLI and the test battery.
//!
//! All math is generic over the scalar type through [`num::Real`], which is
//! implemented for `f32` and `f64`. The trainer and CLI pin `f64`.

// Validators use `!(x > 0.0)` so that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod corpus;
pub mod divergences;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod num;
pub mod numerics;
pub mod seq2seq;
pub mod trainer;

pub use error::{Error, Result};
pub use num::Real;

/// Default-precision tensor used by the trainer and the CLI.
pub type Tensor64 = numerics::Tensor<f64>;
/// Default-precision tape.
pub type Tape64 = numerics::Tape<f64>;
/// Single-precision tensor, for callers that trade accuracy for memory.
pub type Tensor32 = numerics::Tensor<f32>;
/// Single-precision tape.
pub type Tape32 = numerics::Tape<f32>;
