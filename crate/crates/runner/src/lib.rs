//! Experiment orchestration for the lab: configuration, training runs with
//! scheduled probes, persistence, and cross-run reports.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod persist;
pub mod report;

pub use config::{load_config, parse_config, preset, ExperimentConfig};
pub use error::{RunnerError, RunnerResult};
pub use experiment::{run_experiment, run_single, RunOptions, RunOutcome, RunSummary};
pub use report::{emit_report, phase_scan, verify_theorems};
