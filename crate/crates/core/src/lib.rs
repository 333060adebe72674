//! Sparse checkpointing for mixture-of-experts training.
//!
//! The crate has two halves. The protocol half (`train`, `schedule`,
//! `recovery`) runs on a small deterministic MoE engine and proves that
//! sparse snapshots, staged sparse-to-dense conversion and localized replay
//! from boundary logs reproduce a fault-free run bit for bit. The efficiency
//! half (`sim`, `workload`) is a discrete-event cluster simulator that
//! compares the sparse policy against dense and partial-expert baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exec;
pub mod model;
pub mod recovery;
pub mod schedule;
pub mod sim;
pub mod train;
pub mod verify;
pub mod workload;

pub use error::{Error, Result};
pub use exec::Execution;
