//! Joint accuracy/cost optimization for multi-stage ML inference pipelines.
//!
//! The crate selects, per pipeline stage, a model variant, a batch size, and a
//! replica count by solving an integer program exactly, and validates those
//! decisions by replaying workload traces through a deterministic
//! discrete-event simulator.
//!
//! Module map:
//! - [`catalog`]: pipeline/variant data model and catalog file loading
//! - [`profiler`]: latency curve fitting, base allocations, SLA derivation
//! - [`accuracy`]: rank-scaled accuracy of variants and pipelines
//! - [`optimizer`]: the exact variant/batch/replica solver and its restricted
//!   (fixed-variant, fixed-replica) siblings
//! - [`predictor`]: reference-load forecasting behind a pluggable interface
//! - [`simulator`]: discrete-event replay with central queues, batching,
//!   round-robin dispatch, and SLA-based dropping
//! - [`adapter`]: the monitor → predict → solve → apply control loop and
//!   policy comparisons
//! - [`synth`]: seeded synthetic instance generation for benchmarks and tests

pub mod accuracy;
pub mod adapter;
pub mod catalog;
pub mod optimizer;
pub mod predictor;
pub mod profiler;
pub mod simulator;
pub mod synth;

pub use catalog::{Configuration, LatencyModel, ModelVariant, Pipeline, Stage, StageConfig};
