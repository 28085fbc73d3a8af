//! Population-batched numerics for training many small reinforcement-learning
//! agents at once.
//!
//! Every trainable quantity is stored as a [`PopTensor`] whose leading axis
//! indexes population members. Update rules ([`algos`]) are written once and
//! applied to the whole population in a single pass; running them on a
//! population of one gives the plain single-agent algorithm, bit for bit.
//!
//! The crate is `no_std` (it needs `alloc`). The default `parallel` feature
//! pulls in `std` and spreads per-member kernels over a rayon pool without
//! changing results.
#![no_std]
// `!(x > 0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adam;
pub mod algos;
pub mod envs;
mod error;
pub mod evolve;
pub mod mlp;
pub mod plan;
mod real;
pub mod replay;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::PopTensor;
