//! Orchestration: run configuration, file-backed stages and reports.

pub mod config;
pub mod report;
pub mod stages;
pub mod tasks;

pub use config::RunConfig;
pub use stages::{run_all, run_stage, Layout, Stage, StageSummary};
