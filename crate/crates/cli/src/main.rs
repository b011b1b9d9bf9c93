//! `wsrpn`: synthetic data generation, training, evaluation, prediction,
//! heatmap export and gradient checking.

mod commands;
mod layered;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layered::{parse_assignment, Override};
use wsrpn::WsrpnError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit status 1.
    Usage(String),
    /// Failure while running; exit status 2.
    Runtime(WsrpnError),
}

impl From<WsrpnError> for CliError {
    fn from(e: WsrpnError) -> Self {
        match e {
            WsrpnError::Config(_) | WsrpnError::ImageSide { .. } | WsrpnError::BatchTooSmall(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wsrpn",
    version,
    about = "Weakly supervised ROI proposal networks"
)]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Layering {
    /// TOML configuration, usually an echoed effective config of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.model.beta=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<Override>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic blob dataset.
    GenData(commands::GenDataArgs),
    /// Train a model and keep the checkpoint with the best validation mAP.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Detect boxes in a directory of images.
    Predict(commands::PredictArgs),
    /// Write receptive fields and patch class maps as PGM images.
    ExportHeatmaps(commands::ExportArgs),
    /// Finite-difference check of the full training loss on a tiny model.
    GradCheck(commands::GradCheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::ExportHeatmaps(a) => commands::export_heatmaps(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
