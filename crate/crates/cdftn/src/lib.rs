//! File formats, experiment orchestration and reporting on top of `cdftn-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod plots;
pub mod records;

pub use config::{DomainSource, ExperimentConfig, Overrides};
pub use pipeline::{run_pipeline, RunPaths};
