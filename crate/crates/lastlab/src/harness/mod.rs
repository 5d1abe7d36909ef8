//! Experiment harness: configuration, run artifacts, CLI commands, and the
//! ablation driver.

pub mod ablation;
pub mod artifacts;
pub mod commands;
pub mod config;
pub mod run;
