//! Experiment orchestration: configs, suite execution, and result files.

pub mod config;
pub mod output;
pub mod report;
pub mod results;
pub mod run;
pub mod sweep;
