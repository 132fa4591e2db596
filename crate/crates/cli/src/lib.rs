//! Command-line driver for phase-shift rollback: calibration, generation,
//! paired evaluation, sweeps and basis export.

pub mod args;
pub mod commands;
pub mod config;
pub mod workload;
