use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{CliError, Run};
use config::{load_config, ExperimentConfig};

/// Monte Carlo experiments for time-discretised SDEs.
#[derive(Parser, Debug)]
#[command(name = "uitsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML (dotted keys) or JSON experiment file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Ensemble statistics of the configured observables and moments.
    Simulate,
    /// Standard tamed against truncated tamed Euler for several alpha.
    Fig1,
    /// Weak error against a fine reference on shared noise.
    WeakError,
    /// Fitted weak order over a geometric delta sweep.
    Order,
    /// One-step weak error over states and steps.
    LocalError,
    /// Moment bounds; audits the contraction recursion for TTE.
    Moments,
    /// Decay rate of the semigroup gradient.
    Ses,
    /// Evaluate the registered assumption inequalities.
    Check,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::ConfigError {
                field: "--threads".into(),
                message: "must be >= 1".into(),
            }
            .into());
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = commands::out_dir(cli.out.as_deref(), &cfg);
    let run = Run::new(cfg, out)?;
    match cli.command {
        Command::Simulate => commands::simulate(&run),
        Command::Fig1 => commands::fig1(&run),
        Command::WeakError => commands::weak_error(&run),
        Command::Order => commands::order(&run),
        Command::LocalError => commands::local_error(&run),
        Command::Moments => commands::moments(&run),
        Command::Ses => commands::ses(&run),
        Command::Check => commands::check(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
