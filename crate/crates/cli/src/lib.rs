//! Command-line harness for reward-free OLIVE: experiment configs, named
//! fixtures, and the `run`, `check`, `dim`, `fixture` and `sweep`
//! subcommands. All structured output is JSON (traces are CSV) and every
//! file is written atomically.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod instance;
pub mod output;

pub use cli::main_with;
pub use error::{exit, CliError};
