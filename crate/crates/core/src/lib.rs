//! Over-the-air federated learning with normalized gradient aggregation.
//!
//! Devices transmit their local gradients, normalized to unit norm, as analog
//! signals over a shared fading channel. The server receives the noisy
//! superposition, scales it, and takes a descent step. This crate simulates
//! that loop, optimizes the device and server amplification factors, and
//! evaluates the convergence bounds of the scheme against measured runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod bounds;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod optimizer;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
