//! Library half of the `duple` command-line tool: run configuration
//! and the subcommand implementations.  The binary in `main.rs` only
//! parses flags, resolves the configuration and dispatches here.

pub mod commands;
pub mod config;
