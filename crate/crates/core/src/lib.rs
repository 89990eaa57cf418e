//! Cost simulator for mixture-of-experts transformer inference on
//! processing-in-memory crossbar arrays with shared peripheral circuits.
//!
//! The library models one MoE layer end to end: gate-score traces feed a
//! routing stage (token-choice or expert-choice, batch or incremental),
//! experts are partitioned into peripheral-sharing groups, the prefill
//! token/expert work is laid out by one of three schedulers, decode steps
//! run against optional KV and gate-output caches, and a cost model turns
//! the resulting activity counts into latency, energy, area and throughput
//! density figures.
//!
//! Everything is deterministic: the same configs, trace and seed always
//! produce identical results, down to the serialized report bytes.

pub mod cache;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod grouping;
pub mod routing;
pub mod scheduling;
pub mod trace;

pub use config::{Configs, ExperimentConfig, HardwareConfig, ModelConfig};
pub use engine::{RunResult, SweepResult};
pub use trace::Trace;
