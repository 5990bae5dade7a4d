//! Library side of the `drae` binary, so integration tests can drive the
//! same code paths without spawning processes.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod render;
