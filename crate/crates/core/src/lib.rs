//! Simulation framework for haptic teleoperation over lossy wireless links.
//!
//! The crate models a temporally correlated fading channel, trains a
//! cross-attention GRU force estimator, restores lost force packets at
//! runtime and evaluates the resulting reliability, coverage and capacity.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the per-channel equations they implement.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gru;
pub mod link_budget;
pub mod math;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod restoration;
pub mod tensor;
pub mod traces;
pub mod training;

pub use error::{Error, Result};
