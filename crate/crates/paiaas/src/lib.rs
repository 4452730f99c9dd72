//! Experiment runner for the smart-contract resource allocator: run
//! configuration, scenarios, and the files a run writes.

pub mod checkpoint;
pub mod config;
pub mod runner;

pub use config::{ConfigError, RunConfig, Scenario};
pub use runner::{run_scenario, simulate, AgentRun, RunError, RunSummary};
