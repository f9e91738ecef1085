//! Batch preprocessing, anchor, evaluation and network-inspection commands.

pub mod commands;
pub mod config;
pub mod frames;

pub use config::RunConfig;
