//! Threads, files and the command line around [`popvec_core`].
//!
//! [`pipeline::run_training`] runs the actor/learner loop: actor threads step
//! environments with the latest published policy, an ingest thread fills the
//! replay buffers, and the learner performs bursts of `K` population updates
//! paced by the update-to-environment-step ratio guard. [`bench`] times the
//! same update in sequential, vectorized and threaded form, and [`cli`] wires
//! everything to the `popvec` binary.
// `!(x > 0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
mod error;
pub mod mailbox;
pub mod metrics;
pub mod pipeline;
pub mod plotdata;
pub mod shared_replay;

pub use error::{Error, Result};
pub use popvec_core as core;
