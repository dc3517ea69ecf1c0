//! `reflex`: terminal entry points for chatting, experiments, training and
//! replay.

mod chat;
mod experiments;
mod replay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reflex_core::backends::BackendConfig;

#[derive(Debug, Parser)]
#[command(name = "reflex", version, about = "Reflective human-in-the-loop image generation")]
struct Cli {
    /// Root seed; every command is reproducible for a fixed seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output format for results.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Backend config file (JSON). REFLEX_BASE_URL and REFLEX_API_KEY override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Interactive session; answer with `aspect=value` pairs or free text.
    Chat(chat::ChatArgs),
    /// Simulated dialogues in the toy world; per-round mean alignment.
    Simulate(experiments::SimulateArgs),
    /// Train the toy denoising policy on preference pairs.
    TrainDpo(experiments::TrainArgs),
    /// Write synthetic preference pairs (winner further into x > 0).
    SynthPairs(experiments::SynthArgs),
    /// Neglect-detection threshold sweep.
    AaeSweep(experiments::SweepArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Rebuild a session from its event log and summarize it.
    Replay(replay::ReplayArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Address to bind; falls back to REFLEX_LISTEN, then 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<String>,
    /// Where session logs, blobs, pairs and policies live.
    #[arg(long, default_value = "reflex-data")]
    data_dir: PathBuf,
    /// Probability that the toy generator ignores a pinned aspect.
    #[arg(long, default_value_t = 0.0)]
    neglect: f64,
    /// Train after every this many preference pairs.
    #[arg(long, default_value_t = 40)]
    pairs_per_training: usize,
}

/// Common context handed to every command.
pub struct Ctx {
    pub seed: u64,
    pub format: Format,
    pub config: Option<PathBuf>,
}

impl Ctx {
    pub fn backend_config(&self) -> Result<BackendConfig, String> {
        BackendConfig::load(self.config.as_deref()).map_err(|e| format!("config: {e}"))
    }
}

fn serve(ctx: &Ctx, args: ServeArgs) -> Result<(), String> {
    use reflex_service::{listen_addr, AppState, ServiceConfig};

    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if !(0.0..=1.0).contains(&args.neglect) {
        return Err(format!("--neglect must be in [0, 1], got {}", args.neglect));
    }
    if args.pairs_per_training == 0 {
        return Err("--pairs-per-training must be positive".into());
    }
    let mut cfg = ServiceConfig::new(&args.data_dir);
    cfg.backend = ctx.backend_config()?;
    cfg.neglect_prob = args.neglect;
    cfg.pairs_per_training = args.pairs_per_training;
    let app = AppState::open(cfg).map_err(|e| e.to_string())?;
    let addr = listen_addr(args.listen.as_deref());
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| format!("cannot bind {addr}: {e}"))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        reflex_service::serve(listener, app).await.map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        format: cli.format,
        config: cli.config,
    };
    let result = match cli.command {
        Command::Chat(a) => chat::run(&ctx, a),
        Command::Simulate(a) => experiments::simulate(&ctx, a),
        Command::TrainDpo(a) => experiments::train_dpo(&ctx, a),
        Command::SynthPairs(a) => experiments::synth_pairs(&ctx, a),
        Command::AaeSweep(a) => experiments::aae_sweep(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Replay(a) => replay::run(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(reason) => {
            eprintln!("error: {}", reason.lines().next().unwrap_or("failed"));
            ExitCode::FAILURE
        }
    }
}
