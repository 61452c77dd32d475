use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "hidformer",
    version,
    about = "Train, evaluate and backtest Hidformer stock forecasters"
)]
pub struct Cli {
    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score a checkpoint on the validation windows.
    Eval(EvalArgs),
    /// Trade the checkpoint's one-step forecasts over the validation period.
    Backtest(BacktestArgs),
    /// Train, evaluate and backtest once per seed, then aggregate.
    Runs(RunsArgs),
}

/// `--key value` overrides for every configuration key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long = "t_x", value_name = "N")]
    pub t_x: Option<String>,
    #[arg(long = "t_y", value_name = "N")]
    pub t_y: Option<String>,
    #[arg(long, value_name = "N")]
    pub stride: Option<String>,
    #[arg(long = "n_t", value_name = "N")]
    pub n_t: Option<String>,
    #[arg(long = "n_e", value_name = "N")]
    pub n_e: Option<String>,
    #[arg(long = "n_b", value_name = "N")]
    pub n_b: Option<String>,
    #[arg(long = "n_d", value_name = "N")]
    pub n_d: Option<String>,
    #[arg(long = "d_ff", value_name = "N")]
    pub d_ff: Option<String>,
    #[arg(long = "merge_factor", value_name = "N")]
    pub merge_factor: Option<String>,
    #[arg(long = "batch_size", value_name = "N")]
    pub batch_size: Option<String>,
    #[arg(long = "learning_rate", value_name = "X")]
    pub learning_rate: Option<String>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<String>,
    #[arg(long = "split_fraction", value_name = "X")]
    pub split_fraction: Option<String>,
    #[arg(long = "selection_fraction", value_name = "X")]
    pub selection_fraction: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    #[arg(long = "stats_scope", value_name = "train|all")]
    pub stats_scope: Option<String>,
    #[arg(long = "metrics_scale", value_name = "normalized|raw")]
    pub metrics_scale: Option<String>,
}

impl Overrides {
    /// Set overrides as `(key, value)` pairs in key order.
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("t_x", &self.t_x),
            ("t_y", &self.t_y),
            ("stride", &self.stride),
            ("n_t", &self.n_t),
            ("n_e", &self.n_e),
            ("n_b", &self.n_b),
            ("n_d", &self.n_d),
            ("d_ff", &self.d_ff),
            ("merge_factor", &self.merge_factor),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("split_fraction", &self.split_fraction),
            ("selection_fraction", &self.selection_fraction),
            ("seed", &self.seed),
            ("stats_scope", &self.stats_scope),
            ("metrics_scale", &self.metrics_scale),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Daily OHLCV CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score the true futures against themselves instead of the model.
    #[arg(long)]
    pub self_test: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Persistence,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also backtest a baseline and write its report.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Trade on the true next closes (perfect foresight).
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct RunsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}
