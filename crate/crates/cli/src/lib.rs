//! Command-line pipeline (import, world building, initial training,
//! evaluation, sweeps) and the HTTP session service.

pub mod commands;
pub mod config;
pub mod server;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::{BusyPolicy, EngineConfig};

#[derive(Debug, Parser)]
#[command(name = "cilk", version, about = "Continuous interactive knowledge learning engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract a triple KB from a WordNet database directory.
    ImportWordnet(commands::ImportWordnet),
    /// Split an original KB into base KB, user KB and query stream.
    BuildWorld(commands::BuildWorld),
    /// Train the initial model on a world's base KB and write a checkpoint.
    InitTrain(commands::InitTrain),
    /// Stream a world's queries through a checkpointed engine.
    Evaluate(commands::Evaluate),
    /// Evaluate a grid of session configurations.
    Sweep(commands::Sweep),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory; overrides the configured path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long, value_enum)]
    pub busy: Option<BusyPolicy>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::ImportWordnet(a) => commands::import_wordnet(&a, out),
        Command::BuildWorld(a) => commands::cmd_build_world(&a, out),
        Command::InitTrain(a) => commands::init_train(&a, out),
        Command::Evaluate(a) => commands::evaluate(&a, out),
        Command::Sweep(a) => commands::sweep(&a, out),
        Command::Serve(a) => {
            let cfg = EngineConfig::load_or_default(a.config.as_deref())?;
            let dir = a
                .checkpoint
                .or(cfg.paths.checkpoint.clone())
                .ok_or_else(|| anyhow::anyhow!("serve needs --checkpoint or paths.checkpoint"))?;
            let engine = cilk_core::checkpoint::load_engine(&dir)?;
            let addr = a.addr.unwrap_or(cfg.service.addr.clone());
            let busy = a.busy.unwrap_or(cfg.service.busy);
            let svc = server::Service::new(engine, busy, Some(dir));
            tokio::runtime::Runtime::new()?.block_on(server::serve(svc, &addr))
        }
    }
}
