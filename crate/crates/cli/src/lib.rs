//! Library surface of the pipeline CLI: config parsing, shared pipeline
//! glue, and the subcommand implementations. The binary in `main.rs` is a
//! thin argument parser over these.

pub mod commands;
pub mod config;
pub mod pipeline;
