//! Library surface of the experiment harness, exposed so integration and
//! acceptance tests can drive experiments in-process.

pub mod bandwidth;
pub mod config;
pub mod experiment;
pub mod verify;
