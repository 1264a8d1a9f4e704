//! Experiment harness for the vertical federated learning engine: config
//! files, training orchestration, metrics CSVs, and summary reports. The
//! `apfed` binary is a thin shell over this library so tests can drive
//! every command in-process.

pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;
