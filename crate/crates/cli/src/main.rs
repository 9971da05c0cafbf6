//! `icontra`: extract records, run edits, inspect results and serve the API.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "icontra", version, about = "Training-free concept transfer on a latent diffusion backbone")]
struct Cli {
    /// Reference model config (JSON file, or a directory with config.json).
    #[arg(long, global = true, env = "ICONTRA_MODEL_PATH")]
    model: Option<PathBuf>,

    /// Override the model's working resolution (multiple of 128).
    #[arg(long, global = true)]
    resolution: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Invert a photo into a reusable record directory.
    Invert(commands::InvertArgs),
    /// Generate one edit from a record.
    Edit(commands::EditArgs),
    /// Compare images or summarize a record's results.
    Metrics(commands::MetricsArgs),
    /// Run inversions and edits listed in a JSON manifest.
    Batch(commands::BatchArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = icontra_service::config::DEFAULT_PORT)]
    port: u16,

    /// Data directory; defaults to ICONTRA_DATA_DIR or ./icontra-data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let model = commands::ModelChoice {
        path: cli.model,
        resolution: cli.resolution,
    };
    let outcome = match cli.command {
        Command::Invert(a) => commands::invert(&model, &a),
        Command::Edit(a) => commands::edit(&model, &a),
        Command::Metrics(a) => commands::metrics(&model, &a),
        Command::Batch(a) => commands::batch(&model, &a),
        Command::Serve(a) => serve(&model, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("icontra: {e}");
            e.exit()
        }
    }
}

fn serve(model: &commands::ModelChoice, args: ServeArgs) -> Result<(), CliError> {
    let mut config = icontra_service::ServiceConfig::from_env(args.port);
    if let Some(dir) = args.data_dir {
        config.data_dir = dir;
    }
    let _lock = icontra_core::store::DirLock::acquire(&config.data_dir)?;
    let engine = icontra_service::PipelineEngine::new(model.load()?, Default::default());
    let service = icontra_service::SessionService::open(&config.data_dir, std::sync::Arc::new(engine))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Pipeline(format!("cannot start runtime: {e}")))?;
    runtime
        .block_on(icontra_service::serve(service, config.addr))
        .map_err(|e| CliError::Pipeline(format!("server stopped: {e}")))
}
