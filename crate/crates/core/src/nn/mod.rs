//! Minimal f64 reverse-mode autodiff the networks are built on.
//!
//! Tensors live on a [`Tape`]; every op records a backward closure. The
//! engine is deliberately small: dynamic-rank `f64` arrays, stride-1
//! convolutions via im2col GEMM, and exactly the sampling/scatter ops the
//! keypoint-fusion architecture needs. Everything is deterministic: fixed
//! chunking for the parallel GEMM splits, no scheduling-dependent
//! reductions.

pub mod check;
pub mod params;
pub mod tape;

pub use check::{central_diff_grad, max_rel_err, rel_err};
pub use params::{Adam, ParamStore};
pub use tape::{Gradients, Tape, Var};
