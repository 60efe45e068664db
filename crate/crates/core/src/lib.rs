//! Numerical core of the long-tail laboratory.
//!
//! Everything in this crate is pure computation over `alloc` buffers: a
//! tape-based reverse-mode differentiator over dense `f64` tensors, a small
//! vision transformer with bottleneck adapters and penultimate/final feature
//! taps, the gated dual-head classifier with its logit-adjusted objective,
//! the rebalancing losses, an SGD trainer, evaluation metrics, entropic and
//! exact optimal transport, and Monte-Carlo Rademacher estimates.
//!
//! File formats, configuration parsing and the command line live in the
//! `ltlab` companion crate.
#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod head;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ot;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
