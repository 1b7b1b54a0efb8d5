//! Library surface of the pipeline driver: configuration and the stage
//! implementations the `mvq` binary (and the test suites) run.

pub mod config;
pub mod stages;

pub use config::RunConfig;
pub use stages::{run_all, run_stage, RunPaths, StageOutcome};
