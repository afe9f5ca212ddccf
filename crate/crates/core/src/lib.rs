//! Continuous latent sequence modeling on a small CPU budget.
//!
//! Autoregressive models over sequences of real-valued frames: a causal
//! backbone (optionally trained on noise-injected history) plus a
//! short-context transformer produce a conditioning vector per step, and a
//! sampler head turns it into the next frame. Three heads are provided: a
//! continuous-time consistency head (one or few steps), a flow-matching head
//! integrated with Euler steps, and a discrete residual-quantized head.
//!
//! The crate is `no_std` with `alloc`; the `std` feature (default) enables
//! runtime CPU feature detection in the matrix kernels.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod check;
pub mod elo;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod source;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
