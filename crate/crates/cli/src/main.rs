mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ridsim::madqn::MadqnError;

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "RIDSIM_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ridsim", version, about = "Remote ID delay, avoidance and protocol-selection experiments")]
struct Cli {
    /// TOML config file with one section per command.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set delay_sweep.seeds=20`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Defaults to `$RIDSIM_OUTPUT_DIR/<command>` or `ridsim-out/<command>`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean fleet delay for every (protocol, rate, area) cell.
    DelaySweep,
    /// Packet loss of fixed protocol modes across areas.
    PacketLoss,
    /// Closed-loop avoidance runs on the canned crossing scenario.
    Dmuca,
    /// Train per-UAV Q-networks.
    Train,
    /// Compare learned, fixed and random policies.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat the run described by a manifest.
    Rerun {
        manifest: PathBuf,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

/// Invalid configuration or arguments (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn main() -> ExitCode {
    // unreachable-UAV warnings fire on every sparse snapshot; RUST_LOG shows them
    let filter = "info,ridsim::expected_delay=error,ridsim::sim_env=error";
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(filter)).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(MadqnError::Divergence { .. } | MadqnError::NonFiniteLoss(_)) = cause.downcast_ref::<MadqnError>() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides).map_err(|e| ConfigError(format!("{e:#}")))?;
    let (name, mut cfg) = match cli.command {
        Command::ShowConfig => {
            print!("{}", toml::to_string(&cfg)?);
            return Ok(());
        }
        Command::Rerun { manifest } => {
            let m = manifest::RunManifest::read(&manifest)?;
            let cfg: config::Config = serde_json::from_value(m.config).map_err(|e| ConfigError(format!("manifest config: {e}")))?;
            let out = cli.out.unwrap_or_else(|| manifest.parent().map(PathBuf::from).unwrap_or_default());
            return commands::dispatch(&m.command, &cfg, &out);
        }
        Command::Evaluate { checkpoint } => {
            let mut cfg = cfg;
            if checkpoint.is_some() {
                cfg.evaluate.checkpoint = checkpoint;
            }
            ("evaluate", cfg)
        }
        Command::DelaySweep => ("delay-sweep", cfg),
        Command::PacketLoss => ("packet-loss", cfg),
        Command::Dmuca => ("dmuca", cfg),
        Command::Train => ("train", cfg),
    };
    let out = cli.out.unwrap_or_else(|| output_root().join(name));
    if name == "evaluate" {
        // store an absolute checkpoint path so reruns from elsewhere find it
        if let Some(p) = cfg.evaluate.checkpoint.take() {
            cfg.evaluate.checkpoint = Some(std::path::absolute(&p).unwrap_or(p));
        }
    }
    commands::dispatch(name, &cfg, &out)
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ridsim-out"))
}
