//! Run configuration, checkpoints, verification and the subcommand bodies.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
