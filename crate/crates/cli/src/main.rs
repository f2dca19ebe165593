use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedrs::transport::TransportError;
use fedrs_cli::experiment::{run_client, run_server, ExperimentError, ExperimentOutput};
use fedrs_cli::output::{write_replay, write_run};
use fedrs_cli::replay::replay_bytes;
use fedrs_cli::{run_experiment, ExperimentConfig};
use log::error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BIND: u8 = 3;

#[derive(Parser)]
#[command(name = "fedrs", version, about = "Federated learning server, client and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run server and all clients in this process over the loopback transport.
    Experiment(Common),
    /// Serve the experiment over TCP and wait for clients.
    Server(Common),
    /// Run one client of the experiment against the configured server.
    Client {
        #[command(flatten)]
        common: Common,
        /// Which client of the partition to run.
        #[arg(long)]
        index: usize,
    },
    /// Print analytic bytes per round for sampling rates 0.1 to 1.0.
    ReplayBytes(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, ExitCode> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn failure(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        ExperimentError::Transport(TransportError::Bind { .. }) => ExitCode::from(EXIT_BIND),
        ExperimentError::Data(_) | ExperimentError::ClientIndex { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUNTIME),
    }
}

fn finish(cfg: &ExperimentConfig, out: ExperimentOutput) -> ExitCode {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = write_run(&dir, cfg, &out.run.records, &out.run.final_weights) {
        eprintln!("error: cannot write results to {}: {e}", dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    println!(
        "{} of {} rounds in {:.2}s, results in {}",
        out.run.records.len(),
        cfg.rounds,
        out.elapsed.as_secs_f64(),
        dir.display()
    );
    if let Some(e) = &out.run.error {
        error!("run stopped early: {e}");
    }
    if out.completed(cfg) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn replay(cfg: &ExperimentConfig, out: Option<&Path>) -> ExitCode {
    let rows = replay_bytes(cfg);
    let result = match out {
        Some(dir) => std::fs::create_dir_all(dir)
            .map_err(csv::Error::from)
            .and_then(|_| std::fs::File::create(dir.join("replay_bytes.csv")).map_err(csv::Error::from))
            .and_then(|f| write_replay(f, &rows)),
        None => write_replay(std::io::stdout().lock(), &rows),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, index) = match &cli.command {
        Command::Experiment(c) | Command::Server(c) | Command::ReplayBytes(c) => (c, None),
        Command::Client { common, index } => (common, Some(*index)),
    };
    let cfg = match load(common) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match cli.command {
        Command::Experiment(_) => match run_experiment(&cfg) {
            Ok(out) => finish(&cfg, out),
            Err(e) => failure(&e),
        },
        Command::Server(_) => match run_server(&cfg) {
            Ok(out) => finish(&cfg, out),
            Err(e) => failure(&e),
        },
        Command::Client { .. } => match run_client(&cfg, index.expect("client index")) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => failure(&e),
        },
        Command::ReplayBytes(_) => replay(&cfg, common.out.as_deref()),
    }
}
