//! Experiment configuration and pipeline orchestration.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::{preset, DatasetSpec, ExperimentConfig, InterpolantSpec, MetricSpec, Protocol, VectorFieldSpec, PRESETS};
pub use manifest::{RunManifest, StageRecord, StageStatus};
pub use pipeline::{run, RunOutcome};
