use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reloadsim::config::RunConfig;
use reloadsim::report::{execute, Command};
use reloadsim::storage::Mode;
use reloadsim::Error;

/// Seeded simulator for continuously reloaded tweezer arrays.
#[derive(Parser)]
#[command(name = "reloadsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trial count for the chosen experiment.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Simulated duration in seconds (flux and maintain).
    #[arg(long, global = true)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Storage mode for maintain.
    #[arg(long, global = true, default_value = "atoms")]
    mode: Mode,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extraction flux and qubit flux with and without rearrangement.
    Flux,
    /// Repeated extraction from a single reservoir.
    Deplete,
    /// Storage assembly and continuous reloading.
    Maintain,
    /// T1 and T2 scans in each environment.
    Coherence,
    /// Rearrangement statistics, or the plan for one occupancy grid.
    RearrangeBench {
        /// CSV of 0/1 values, one row per preparation-zone row.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Qubit supply needed to replace losses in a processor.
    Capacity,
}

fn load(c: &Common, cmd: &Cmd) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(d) = c.duration {
        match cmd {
            Cmd::Flux => cfg.flux.duration = d,
            Cmd::Maintain => cfg.maintain.duration = d,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::InvalidParameter { .. } | Error::Probability { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli.common, &cli.cmd) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if is_config_error(&e) || matches!(e, Error::Io { .. }) {
                2
            } else {
                1
            });
        }
    };
    let cmd = match cli.cmd {
        Cmd::Flux => Command::Flux,
        Cmd::Deplete => Command::Deplete,
        Cmd::Maintain => Command::Maintain {
            mode: cli.common.mode,
        },
        Cmd::Coherence => Command::Coherence,
        Cmd::RearrangeBench { grid } => Command::RearrangeBench { grid },
        Cmd::Capacity => Command::Capacity,
    };
    match execute(&cmd, &cfg, &cli.common.out) {
        Ok(checks) => {
            for c in &checks {
                println!("{}", c.line());
            }
            println!("outputs written to {}", cli.common.out.display());
            if checks.iter().all(|c| c.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
