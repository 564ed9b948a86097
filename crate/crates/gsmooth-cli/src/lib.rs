//! Experiment configuration and execution behind the `gsmooth` binary.

pub mod config;
pub mod runner;
