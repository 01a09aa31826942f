//! Dynamic power simulation of tiled RRAM in-memory-computing accelerators
//! and a power side-channel toolkit that recovers the mapped network
//! architecture from per-tile traces.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod attack;
pub mod config;
pub mod error;
pub mod mapper;
pub mod netspec;
pub mod powersim;
pub mod robustness;
pub mod trace;

pub use error::{Error, Result};
