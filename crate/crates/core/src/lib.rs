//! Horizon-aware flow-matching sampling for action-chunking policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: hit times, per-index timesteps, prefix masks and the mixed
//!   training-schedule sampler.
//! - [`neural`]: a small dense network with exact backprop and AdamW.
//! - [`flow`]: conditional flow-matching training, constant and horizon-aware
//!   Euler samplers, and the straightness / clean-estimate diagnostics.
//! - [`env`]: the 2-D target-chasing world, expert demonstrator and dataset
//!   generation.
//! - [`pipeline`]: the analytic reaction-time model and a discrete-event
//!   simulator of sync / async / streaming clients.
//! - [`wire`]: the length-prefixed streaming protocol, policy server and
//!   real-time client.
//! - [`config`]: the JSON run configuration.
//! - [`cli`]: the `hflow` command line.

pub mod cli;
pub mod config;
pub mod env;
mod error;
pub mod flow;
pub mod neural;
pub mod pipeline;
pub mod schedule;
pub mod wire;

pub use error::{Error, Result};
