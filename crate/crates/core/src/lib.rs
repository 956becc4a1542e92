//! Deterministic simulator for expert-parallel Mixture-of-Experts training.
//!
//! Models one training iteration block by block (attention, dispatch, expert
//! compute, combine) under six strategies: plain expert parallelism
//! (`vanilla`), expert-moving baselines (`ext`, `hyt`), and sequence
//! migration plus token condensation (`luffy` and its two ablations).
//! Costs come from analytic models, so runs are exact and reproducible.
//!
//! Data-parallel inner loops (per-group similarity measurement, per-sequence
//! traffic estimation, strategy comparison) use rayon when the default
//! `parallel` feature is on; see [`exec::Exec`].

// `!(x > 0.0)` is how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condense;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod exec;
pub mod migration;
pub mod model;
pub mod report;
pub mod trace;
pub mod workload;

pub use config::SimConfig;
pub use engine::{
    compare, run, simulate_iteration, BatchSource, BlockReport, IterationReport, RunOutput,
    RunSummary, Strategy,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{BatchState, ClusterConfig, ModelConfig};
