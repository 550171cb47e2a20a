//! Distributed training simulator built around the outer-product structure
//! of layer gradients.
//!
//! Reverse-mode differentiation produces each layer's weight gradient as
//! `A' * Delta`, a product of two batch-row factor matrices. The modules
//! here simulate data-parallel training where sites exchange those factors
//! (raw, rank-compressed via structured power iterations, or baselines)
//! instead of dense gradients, with exact per-layer byte accounting over a
//! real wire format.

pub mod adam;
pub mod cluster;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod rnn;
pub mod simnet;
pub mod spi;
pub mod strategies;

pub use error::{Error, Result};
pub use matrix::{gemm, Matrix};
pub use rng::Rng;
