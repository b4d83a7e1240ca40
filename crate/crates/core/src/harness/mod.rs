//! Config files, persisted runs and the experiment suites.

pub mod config;
pub mod pipeline;
pub mod run;
pub mod suite;

pub use config::ExperimentConfig;
pub use run::{EvalTarget, RunDir, RunManifest, TrainOptions};
pub use suite::{Suite, SuiteReport};
