//! Experiment orchestration: configuration, seeded replication, aggregation,
//! persistence and the statistical comparison reports.

pub mod config;
pub mod output;
pub mod run;
pub mod stats;
pub mod verify;

pub use config::ExperimentConfig;
pub use output::{Row, CSV_HEADER};
pub use run::{run_experiment, ExperimentResult};
pub use stats::Summary;
pub use verify::{verify_moments, verify_theorem1, TestReport};
