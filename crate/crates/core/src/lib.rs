//! Federated scale-and-shift (SSF) fine-tuning with per-client SSF pools,
//! learnable keys and instance-adaptive inference.
//!
//! This crate is `no_std` + `alloc`. It carries every numeric and protocol
//! piece of the simulator; file formats, the CLI and thread-based client
//! execution live in the `fedins` crate.
//!
//! Layout, bottom up:
//!
//! * [`nn`]: dense kernels with hand-written backward passes and a
//!   finite-difference gradient checker.
//! * [`ssf`]: scale/shift modulation, merging into affine layers, weighted sums.
//! * [`backbone`]: the frozen toy feature extractor, shared head, queries and
//!   reparameterized inference.
//! * [`pool`]: SSF pools with keys, top-C routing and the key objective.
//! * [`federation`]: strategies, local updates, aggregation and the
//!   communication ledger.
//! * [`data`]: synthetic class clusters, Dirichlet label-shift partitions and
//!   style transforms.

#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backbone;
pub mod data;
mod error;
pub mod federation;
pub(crate) mod math;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod ssf;

pub use error::{Error, Result};
