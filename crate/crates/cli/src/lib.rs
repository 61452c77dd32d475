//! Command-line pipeline around the `hidformer` library: `train`, `eval`,
//! `backtest` and multi-seed `runs`.
//!
//! Exit codes are 0 on success, 1 for data and I/O failures, 2 for
//! configuration errors and 3 for numerical divergence.

pub mod args;
pub mod commands;
pub mod error;

pub use args::{Cli, Command};
pub use error::{CliError, ExitStatus};

/// Runs one parsed command and returns its stdout summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Backtest(a) => commands::cmd_backtest(a),
        Command::Runs(a) => commands::cmd_runs(a),
    }
}
