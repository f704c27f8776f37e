//! Experiment orchestration: declarative configs, a content-addressed binary
//! cache, staged pipeline runs and machine-readable reports.

pub mod cache;
pub mod config;
pub mod pipeline;
pub mod report;

pub use cache::{content_key, read_archive, write_archive, Archive, CacheDir};
pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, write_outputs, RunOptions};
pub use report::Report;
