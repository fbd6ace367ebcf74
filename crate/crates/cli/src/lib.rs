//! Experiment runner: configuration, metrics files, summary tables and plots.

pub mod args;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
