//! Command-line plumbing: flags, checkpoints, atomic output and the
//! subcommands themselves.

pub mod args;
pub mod atomic;
pub mod checkpoint;
pub mod commands;

pub use commands::UsageError;
