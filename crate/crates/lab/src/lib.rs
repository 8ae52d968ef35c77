//! Experiment harness for composite-MDP UCB-Q and UCB-TQL: configuration,
//! per-episode traces, scaling fits, the phase-transition sweep and
//! instance diagnostics.

pub mod commands;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fit;
pub mod output;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
