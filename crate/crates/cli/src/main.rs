use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsa_bootstrap_cli::config::{ExperimentConfig, ExperimentKind};
use lsa_bootstrap_cli::CliError;

#[derive(Parser)]
#[command(version, about = "Averaged linear stochastic approximation experiments")]
struct Cli {
    /// Data seed; the weight seed is set to seed + 1
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kolmogorov distance between the averaged estimator and its Gaussian limit
    NormalApprox(ConfigArgs),
    /// Coverage of bootstrap confidence sets
    Coverage(ConfigArgs),
    /// Stability certificate and step-size admissibility report
    Certify(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set schedule.gammas=[0.5,0.7]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let (kind, args) = match cli.command {
        Command::NormalApprox(a) => (ExperimentKind::NormalApprox, a),
        Command::Coverage(a) => (ExperimentKind::Coverage, a),
        Command::Certify(a) => (ExperimentKind::Certify, a),
    };
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    cfg.experiment = Some(kind);
    if let Some(seed) = cli.seed {
        cfg.seeds.data = seed;
        cfg.seeds.weight = seed.wrapping_add(1);
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    lsa_bootstrap_cli::run(kind, &cfg)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
