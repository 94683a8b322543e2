//! Experiment runner: configuration, report persistence and the drivers that
//! tie the estimators to merging, pruning, masking, embedding and EWC.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod pool;
pub mod report;

pub use error::{LabError, LabResult};
