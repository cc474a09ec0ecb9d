//! Experiment runner: training, one-axis sweeps, the verification suite and
//! log comparison.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;
pub mod verify;
