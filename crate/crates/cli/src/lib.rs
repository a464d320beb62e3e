//! Command implementations behind the `cellfree` binary.

pub mod commands;
pub mod config;
pub mod parallel;
pub mod report;
pub mod verify;
