//! Experiment driver: configuration, runs, artifacts, sweeps and exports.

pub mod artifacts;
pub mod config;
pub mod export;
pub mod hallucination;
pub mod intervals;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, PredictorConfig, PredictorKind};
pub use run::{execute, run, RunRecord, Scenario};

/// Process exit codes of the CLI.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const INVALID_CONFIG: i32 = 1;
    pub const PARTIAL_FAILURE: i32 = 2;
}
