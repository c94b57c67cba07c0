//! Command implementations behind the `podseg` binary.

pub mod commands;
pub mod config;
pub mod export;

pub use config::RunConfig;
