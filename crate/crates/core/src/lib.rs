//! Queueing models for LLM inference serving.
//!
//! The crate covers the latency side of serving a language model behind a
//! single GPU worker:
//!
//! * [`dist`] describes output-token laws and computes clipped moments,
//!   utility of a max-token cap, and the expected maximum over a batch.
//! * [`latency`] holds the linear single-request and batch latency models,
//!   their least-squares calibration, and linear envelopes in the batch size.
//! * [`analytic`] has the closed-form delay and loss formulas: M/G/1 with a
//!   token cap, the impatience blend, the dynamic-batching bound, the
//!   M/D^b/1 fixed-batch delay, and throughput curves.
//! * [`sim`] is a seeded discrete-event simulator for every serving policy,
//!   used as the oracle for the formulas.
//! * [`optimize`] picks the max-token limit and batch size.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the companion `tokenq` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analytic;
pub mod dist;
mod error;
pub mod latency;
mod lsq;
pub mod optimize;
pub mod quad;
pub mod rng;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
