//! `converse-mcts`: generate catalogs, train, evaluate, inspect plans and serve.

mod eval;
mod generate;
mod plan;
mod serve;
mod setup;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

pub const LOG_ENV: &str = "CONVERSE_MCTS_LOG";

#[derive(Parser, Debug)]
#[command(name = "converse-mcts", version, about = "MCTS-planned conversational recommendation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (a file for `generate`, a directory otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic catalog.
    Generate(generate::GenerateArgs),
    /// Self-train the agent with the planner.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint or a baseline on a split.
    Eval(eval::EvalArgs),
    /// Plan for one user and dump the search tree.
    Plan(plan::PlanArgs),
    /// Start the HTTP session service.
    Serve(serve::ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let result = match cli.command {
        Command::Generate(a) => generate::run(&cli.common, a),
        Command::Train(a) => train::run(&cli.common, a),
        Command::Eval(a) => eval::run(&cli.common, a),
        Command::Plan(a) => plan::run(&cli.common, a),
        Command::Serve(a) => serve::run(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
