//! The `melodyalign` command-line pipeline: synthesize a corpus, fit a
//! policy, build preference data, align, then check and evaluate.

pub mod args;
pub mod commands;
pub mod config;

pub use args::Cli;
pub use commands::run;
pub use config::AppConfig;
